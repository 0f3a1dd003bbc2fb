pub mod clients;
pub mod cluster;
pub mod corpus;
pub mod crfgen;
pub mod diagnosis;
pub mod eval;
pub mod pipeline;
pub mod revise;
pub mod simgraph;
pub mod text;
