//! Spatial-coordinate time-optimal motion planning along Pythagorean-hodograph
//! reference splines.

pub mod bernstein;
pub mod corridor;
pub mod geom;
pub mod models;
pub mod nlp;
pub mod ocp;
pub mod ph;
pub mod pipeline;
pub mod quadrature;
pub mod scalar;
pub mod spatial;
pub mod spline;
