"""Semi-supervised sequential variational state estimation with domain
adversarial transfer, on a small numpy autodiff core."""

__version__ = "0.1.0"
