pub mod output;
pub mod pgm;
pub mod trajfile;
