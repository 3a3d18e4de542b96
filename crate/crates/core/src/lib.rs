pub mod equivariant;
pub mod evalsuite;
pub mod molgraph;
pub mod synthdata;
pub mod tensorcore;
pub mod training;
pub mod vaemodel;
