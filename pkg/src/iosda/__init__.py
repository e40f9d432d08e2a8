"""Incremental open-set domain adaptation over streams of feature vectors.

Modules: ``diffcore`` (MLP engine), ``datahub`` (datasets and files),
``mdcgan`` (conditional replay GAN), ``meosda`` (multi-head adversarial
adapter), ``ensemble`` (head selection), ``timeline`` (stream driver),
``evalkit`` (OS/OS*/forgetting), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
