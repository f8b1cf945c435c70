"""Action-gradient critic learning (MAGE) and baselines on a from-scratch autodiff core."""
__version__ = "0.1.0"
