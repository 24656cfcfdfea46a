"""Hierarchical multinomial logistic regression nowcasts of variant prevalence."""

__version__ = "0.1.0"
