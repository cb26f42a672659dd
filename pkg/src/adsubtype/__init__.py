"""Temporal subtyping of AD cohorts from EHR extracts.

Pipeline: cohort selection from CDM-style CSV tables, ICD-to-phecode temporal
feature construction, Hamming/Laplacian-kernel spectral clustering with
elbow-based k selection, and cluster validation (chi-square suites,
multinomial logistic regression, ATC drug prevalence). A seeded synthetic
cohort generator makes the whole pipeline testable without clinical data.
"""

__version__ = "0.1.0"
