pub mod checkpoint;
pub mod cli;
pub mod completion;
pub mod datagen;
pub mod evalkit;
pub mod flowmatch;
pub mod network;
pub mod sampler;
pub mod tensor;
