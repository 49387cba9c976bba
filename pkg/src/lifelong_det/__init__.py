"""Class-incremental two-stage object detection with teacher/student distillation."""

__version__ = "0.1.0"
