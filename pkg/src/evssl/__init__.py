"""Self-supervised pre-training of event-camera encoders from paired RGB embeddings.

Modules, bottom-up: ``events`` (data model and codecs), ``augment`` and
``viewgen`` (views and patch sampling), ``gradcore`` (autodiff), ``model``,
``losses``, ``trainer``, ``synth``, ``evalkit``, ``study`` and ``cli``.
"""

__version__ = "0.1.0"
