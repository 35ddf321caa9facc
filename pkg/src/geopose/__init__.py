"""Synthetic oblique-imagery geocentric pose: scenes, flow, rectification, learning."""

from .flow import FlowField, compose_flow, decompose_flow, rotate_sample, flip_sample
from .projection import GeoPoseSample, SensorGeometry, render_oblique, raycast_displacement
from .scene import Scene, SceneConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "GeoPoseSample",
    "Scene",
    "SceneConfig",
    "SensorGeometry",
    "compose_flow",
    "decompose_flow",
    "flip_sample",
    "generate_scene",
    "raycast_displacement",
    "render_oblique",
    "rotate_sample",
]
