"""Foreground-attentive person re-identification on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
