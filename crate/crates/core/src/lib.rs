//! Shape-aware layered video deformation.
//!
//! A video is held as a foreground/background atlas pair with per-frame UV
//! sampling fields and alpha mattes. A single edited keyframe, together with a
//! sparse correspondence between the source and edited object, is turned into
//! a keyframe deformation, carried through atlas space to every frame, used to
//! deform the UV fields and alpha mattes, and rendered. The [`optimize`]
//! module then refines the edited atlas, the atlas deformation and the
//! correspondence under a pluggable per-pixel guidance gradient.

pub mod affine;
pub mod error;
pub mod field;
pub mod imageio;
pub mod layers;
pub mod lwf;
pub mod optimize;
pub mod propagate;
pub mod raster;
pub mod session;
pub mod synth;
pub mod tps;

pub use affine::Affine2;
pub use error::{Error, Result};
pub use field::{DeformationField, JacobianField, SamplingField, Vec2};
pub use layers::{AtlasLayer, EditBundle, LayeredVideo};
pub use propagate::PropagationResult;
pub use raster::{Border, Raster};
pub use tps::{PointPair, ThinPlateSpline};
