"""Pose estimation, event processing and evaluation algorithms."""
