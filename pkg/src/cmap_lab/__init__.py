"""Consistency-model adversarial purification at desk scale.

Modules: ``numerics`` (random streams, quadrature), ``neural`` (MLP with
hand-written gradients, Adam), ``data`` (synthetic datasets, IDX, snapshots),
``consistency`` (consistency models: analytic backend, CT/CD/TD training),
``classifier``, ``metrics`` (SSIM, restoration and latent losses, MMD, EPS),
``purifier`` (latent optimisation and voting), ``attacks``, ``theory``
(latent-shift simulation and the reconstruction bound) and ``experiments`` /
``cli`` (orchestration).
"""
__version__ = "0.1.0"
