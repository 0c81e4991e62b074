"""Koopman-inspired learned-observation EKF on SE_2(3)."""
