"""Learned surrogate for grasp-induced stress and deformation fields."""
