"""Sea-ice / water segmentation of Sentinel-1 SAR scenes.

Pipeline pieces: :mod:`~seaice.scene_store` (ingest, rasterize, split),
:mod:`~seaice.patch_sampler`, :mod:`~seaice.ice_net` (ResNet18 stem + ASPP),
:mod:`~seaice.trainer`, :mod:`~seaice.scene_inference`, :mod:`~seaice.metrics`
and the ``seaice`` CLI.
"""

__version__ = "0.1.0"
