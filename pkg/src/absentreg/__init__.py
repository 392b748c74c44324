"""Three-stage 3D registration with absent-correspondence detection."""
