//! End-to-end command pipeline and artifact io.
