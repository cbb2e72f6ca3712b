//! Socket-force recovery by model playback and bounding force tubes.
