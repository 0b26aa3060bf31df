"""Multitask BI-RADS descriptor and malignancy prediction for breast ultrasound."""

__version__ = "0.1.0"
