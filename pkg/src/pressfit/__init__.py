"""Desk-scale imitation learning for kinematic peg insertion.

Subsystems: quaternion/pose math (geometry), a deterministic kinematic
simulator with scripted experts (env), trajectory storage and chunk sampling
(data), a small reverse-mode tensor library (tensor, nn), diffusion models
and samplers (diffusion, models), training (training), backward trajectory
augmentation (augment), regression baselines (baselines), and the end-to-end
pipeline with its CLI and teleop/annotation server (pipeline).
"""

__version__ = "0.1.0"
