pub mod eval;
pub mod inputs;
pub mod oracle;
pub mod par;
pub mod prng;
pub mod program;
pub mod transform;
pub mod value;
pub mod runtime;
pub mod session;
pub mod tune;
