# Dataset and result persistence
