"""CoSwin road segmentation: dual-branch Swin/ResNet encoder with context-guided skips, built on a small numpy autograd."""

__version__ = "0.1.0"
