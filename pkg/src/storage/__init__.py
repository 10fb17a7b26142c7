# Storage module
