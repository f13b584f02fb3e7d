# Logging helpers
