"""Unified GAN/VAE laboratory: autodiff core, tabular oracles, objectives, run harness."""
