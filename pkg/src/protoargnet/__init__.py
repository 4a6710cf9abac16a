"""Prototype-based image classifier with super-prototypes and an argumentative read-out.

Modules: ``tensor`` (autodiff), ``shapes`` (synthetic data), ``model``,
``trainer``, ``qbaf`` (argumentation frameworks), ``explain`` and ``cli``.
"""

__version__ = "0.1.0"
