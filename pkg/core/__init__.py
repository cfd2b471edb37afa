# Numerical core: autodiff, geometry, hop graphs, model and training
