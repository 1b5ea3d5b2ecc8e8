"""Sparse causal intervention lab.

Exact backdoor-adjustment oracles on discrete SCMs, prototype-dictionary
construction, logit- and feature-space de-confounding modules over a micro
autodiff engine, a confounded synthetic driving generator, and a robustness
experiment harness.
"""

__version__ = "0.1.0"
