"""Synthetic scenes, point blocks, class splits and episode sampling."""

from .blocks import BlockFormatError, PointBlock, blocks_from_scene, load_block_file, sample_block, write_block_file
from .episodes import (
    BlockPool,
    Episode,
    SplitSpec,
    episode_labels,
    episode_stream,
    load_manifest,
    sample_episode,
    split_classes,
    synthetic_pool,
    write_manifest,
)
from .scene import CLASS_NAMES, PRIMITIVES, Scene, SceneConfig, generate_scene

__all__ = [
    "BlockFormatError",
    "BlockPool",
    "CLASS_NAMES",
    "Episode",
    "PRIMITIVES",
    "PointBlock",
    "Scene",
    "SceneConfig",
    "SplitSpec",
    "blocks_from_scene",
    "episode_labels",
    "episode_stream",
    "generate_scene",
    "load_block_file",
    "load_manifest",
    "sample_block",
    "sample_episode",
    "split_classes",
    "synthetic_pool",
    "write_block_file",
    "write_manifest",
]
