# Pipelines package

# Note: stages p0..p3 are libraries; p5_run.main() is the command-line entry point
