"""Self-supervised ViT pretraining on synthetic pathology tiles, in numpy.

Modules: ``nn_core`` (layers with hand-written backward), ``rope2d``,
``flexi_embed``, ``encoder``, ``ssl_objective``, ``precision``,
``tile_corpus``, ``scalesim``, ``probe_eval`` and ``cli``.
"""

__version__ = "0.1.0"
