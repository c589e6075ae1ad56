"""Self-imitation training for a diffusion trajectory planner on 2D grid worlds.

Subpackages: scene (worlds and distance fields), policy (denoiser,
schedules, samplers, optimizer), reward (trajectory quality metric), sidp
(the training engine), eval (rollouts and metrics), cli (the harness).
"""

__version__ = "0.1.0"
