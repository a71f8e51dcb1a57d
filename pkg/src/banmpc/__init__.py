"""Safe model predictive control with neural terminal values.

The package is organized bottom-up:

  dynamics     vehicle models and RK4 propagation
  safety       barrier values, soft-minimum composition, decrease residual
  parnlp       SQP solver for parametric NLPs plus KKT-based sensitivities
  valuenet     small dense networks: training, gradients, persistence
  controllers  optimal control transcriptions and the controller family
  training     expert data generation and value-function iteration
  bench        closed-loop simulation, metrics, scenarios, command line
"""

__version__ = "0.1.0"
