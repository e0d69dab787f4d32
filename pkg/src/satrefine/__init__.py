"""satrefine: synthesize, adversarially refine, and evaluate satellite-style
image patches.

Subpackages:
  imageops  sprite keying, rotation, compositing, PNG I/O
  autodiff  reverse-mode differentiation engine and optimizers
  nets      refiner / discriminator definitions and checkpoints
  trainer   adversarial losses and the alternating training loop
  metrics   mixture-RBF kernels and unbiased MMD^2 estimators
  tsne      from-scratch t-SNE embedding
  features  SRFT feature files and the fallback extractor
  cli       command-line pipeline
"""

__version__ = "0.1.0"
