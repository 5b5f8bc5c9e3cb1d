"""Predictor-feedback delay compensation for sampled-data nonlinear plants.

Modules
-------
dynamics   plant models, nominal feedbacks and Lipschitz estimates
delayline  the input history over the delay window
predictor  exact predictor, sample-horizon flow and their composition
surrogate  dense-network operator surrogate, datasets and file formats
bounds     Lipschitz and error-amplification constants
simloop    closed-loop simulator and diagnostics
bench      surrogate vs solver timing
cli        experiment runner
"""

__version__ = "0.1.0"
