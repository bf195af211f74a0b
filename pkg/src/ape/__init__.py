"""Anatomical positional embeddings: a 3-channel per-voxel coordinate learned without labels.

Modules: ``volume_io`` (volumes and embedding maps on disk), ``phantom``
(synthetic anatomies with ground truth), ``sampler`` (patches, positive
pairs, augmentations), ``model`` (the embedding network and whole-volume
inference), ``loss``, ``train``, ``retrieval``, ``localization`` and ``cli``.
"""
__version__ = "0.1.0"
