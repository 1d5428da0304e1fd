"""Super-spectral-resolution imaging and quasi-dense surface reconstruction.

The package recovers dense multispectral stacks from RGB images guided by
sparse spectral samples, reconstructs metric surface geometry from two-view
motion anchored to structured-light depth, and renders functional overlays
(oxygen saturation, narrow-band views) on the result.
"""

__version__ = "0.1.0"
