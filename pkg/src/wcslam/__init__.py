"""Dynamic SLAM back ends that estimate camera, object motion and structure jointly."""

__version__ = "0.1.0"
