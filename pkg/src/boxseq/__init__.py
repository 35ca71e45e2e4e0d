"""Box prediction as token generation with an auxiliary regression loss, at desk scale.

Submodules: ``geometry``, ``codec``, ``scenegen``, ``model``, ``train``,
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
