"""Text- and scene-conditioned human motion generation on a synthetic world.

Modules: ``autodiff`` (reverse-mode engine), ``nn`` (layers), ``geometry``,
``body`` (capsule body model), ``world`` (synthetic scenes and motions),
``text``, ``dataset``, ``model``, ``train``, ``evaluate``, ``config``, ``cli``.
"""
__version__ = "0.1.0"
