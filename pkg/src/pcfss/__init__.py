"""Few-shot point cloud segmentation with background prototype adaptation and holistic rectification."""
