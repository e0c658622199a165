"""Object-aware neural radiance fields for dynamic desk-scale scenes.

A scene is decomposed into per-object coordinate networks living inside
moving oriented boxes plus one background network with a semantic head.
Rendering composites color, depth, semantic and instance channels along
rays; training fits all network parameters and object poses jointly from
posed color + label images.
"""

__version__ = "0.1.0"
