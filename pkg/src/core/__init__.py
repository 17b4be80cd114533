# Core package: numerics, model, losses, data, training and evaluation
