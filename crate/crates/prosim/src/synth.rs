//! Synthetic motion-capture generation from simulated walking.
