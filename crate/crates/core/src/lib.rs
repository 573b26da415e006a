pub mod mesh;
pub mod small;
pub mod fem;
pub mod fields;
pub mod model1;
pub mod model2;
pub mod ensemble;
