pub mod error;
pub mod gauss;
pub mod relax;
pub mod model;
pub mod layerprop;
pub mod parallel;
pub mod decision;
pub mod dp;
pub mod certify;
pub mod demo;
pub mod oracle;
