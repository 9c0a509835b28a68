//! Small reverse-mode tensor engine and the generator / discriminator networks built on it.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod discriminator;
pub mod generator;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{stack_channels, Generator, GeneratorConfig};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
