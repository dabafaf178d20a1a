"""Cross-modal point cloud registration at desk scale.

Core package: autodiff engine, rigid geometry, depth-view projection,
learned registration blocks, contrastive/matching losses, data protocol,
and the train/eval/ablate pipeline.  A FastAPI service (`cmreg.service`)
and a CLI (`cmreg.cli`) wrap the pipeline.
"""

__version__ = "0.1.0"
