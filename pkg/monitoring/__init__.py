# Monitoring package
