"""Hierarchical salient patch identification (HSPI).

A classifier's decision is explained by training coarse multiplicative masks
that keep its scores unchanged while switching off as much of the image as
possible.  The surviving peak of each mask marks the most decisive patch;
blanking it and repeating yields further patches, and agreement across grid
sizes decides which of them form the final localization map.

Modules:

``tensor``      interpolation, masking and the classifier's layer kernels
``classifier``  the small CNN standing in for the explained network
``synth``       synthetic fundus-like images with lesion masks
``spi``         one stage: mask training and snapshot selection
``hierarchy``   the multi-stage, multi-size driver
``psmi``        cross-size patch voting and the final map
``evaluation``  metrics, threshold sweeps and the occlusion baseline
``config``      presets and the run configuration
``render``      overlays and per-stage panels
``cli``         the ``hspi`` command
"""

__version__ = "0.1.0"
