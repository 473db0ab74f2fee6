"""focalcir: instance-anchored composed image retrieval with adaptive
attention focus, built end to end at desk scale.

A query is a reference image, a bounding box anchoring one instance in it,
and a modification text describing the wanted target context. The model
biases its cross-attention toward the anchored region by a learned scalar,
and the package ships the synthetic benchmark generator, training loop,
retrieval evaluation, and ablation harnesses needed to study that mechanism.
"""

__version__ = "0.1.0"
