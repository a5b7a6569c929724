"""
Context Guided Correlation Volume - Optical Flow Engine
========================================================

This package builds correlation volumes for RAFT-style optical flow and
refines them with cross-frame context:
- tensor_core.py: dense tensor primitives (sigmoid/softmax maps, pooling, sampling)
- corr_engine.py: all-pairs correlation, pyramid and radius-bounded lookup
- context_volume.py: context gating and lifting with a hand-derived backward
- encoders.py: toy matching and Siamese context encoders
- refine.py: ConvGRU refinement, upsampling
- network.py: the assembled flow network
- gradcheck.py: finite-difference gradient oracle
- training.py: endpoint-error metrics, toy training, ablation sweep
- io_formats.py: PPM/PGM, .flo, PNG, volume dumps, checkpoints
- synth.py: synthetic image pairs with exact ground truth
- diagnostics.py: plane and feature dumps
- cli.py: command-line surface (python -m cgcv)
- config.py / models.py / errors.py: settings, records and exceptions
"""

__version__ = "1.0.0"
__author__ = "CGCV Flow Team"
