"""Spatio-temporal endemic-epidemic count regression for district-level
surveillance data, with mobility-derived covariates, network embeddings,
reporting-delay imputation and pooled inference across imputations."""

__version__ = "0.1.0"
