"""Black-box adversarial robustness toolkit for small acoustic classifiers.

Subpackages cover the full evaluation loop: synthetic corpus generation,
a deterministic acoustic classifier with hand-rolled backprop, a Flipout
variational layer, query-only attacks (evolutionary / zeroth-order /
Gaussian), Wasserstein-dispersion and temporal-consistency detectors, and
the task1/task2 experiment harness.
"""

__version__ = "0.1.0"
