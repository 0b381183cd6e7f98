pub mod commands;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod filter;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod tasks;

pub(crate) fn write_json_line<W: std::io::Write, T: serde::Serialize>(w: &mut W, v: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")
}
