"""Random forests with inbag/out-of-bag bookkeeping and debiased feature importance."""

__version__ = "0.1.0"
