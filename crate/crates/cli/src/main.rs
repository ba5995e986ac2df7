//! `grainforge` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "grainforge", version, about = "Polycrystalline microstructure generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Potts grain-growth simulations and write a GVOX dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a block generation plan.
    Plan {
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value = "isotropic8")]
        strategy: String,
        #[arg(long, default_value_t = 16)]
        max_batch: usize,
        #[arg(long, default_value_t = 32)]
        block_size: usize,
        #[arg(long, default_value_t = 1.5)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a plan's coverage, batch and dependency invariants.
    Verify {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Generate a volume over a plan, checkpointing after every batch.
    Generate(GenerateArgs),
    /// Segment a generated volume into grains.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1.9)]
        eps: f64,
        #[arg(long, default_value_t = 15)]
        min_samples: usize,
        #[arg(long, default_value_t = 1.0)]
        value_gain: f64,
        /// Tile edge for tiled segmentation; omit for a single pass.
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 8)]
        overlap: usize,
        /// keep | nearest
        #[arg(long, default_value = "keep")]
        noise: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare grain statistics of two directories of label volumes.
    Stats {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = 10)]
        aspect_bins: usize,
        #[arg(long)]
        exclude_boundary: bool,
        /// Treat labels as given instead of splitting them into connected pieces.
        #[arg(long)]
        no_components: bool,
        #[arg(long)]
        void_label: Option<u32>,
    },
    /// Voxelize an STL mesh into a mask.
    Voxelize {
        #[arg(long)]
        stl: PathBuf,
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        /// Uniform scale from mesh units to voxels; default fits the mesh to the grid.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        translate: [f64; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a mask to a label volume.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        outside_label: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a label volume as legacy VTK structured points.
    ExportVtk {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a denoiser over the GPN1 protocol.
    Serve {
        #[arg(long, env = "GRAINFORGE_BACKEND")]
        backend: String,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Serve a single session on stdin/stdout instead of TCP.
        #[arg(long)]
        stdio: bool,
        #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
        max_dims: [usize; 3],
        #[arg(long, default_value_t = 250)]
        steps: usize,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// tcp:HOST:PORT, stdio:CMD, analytic:zero|identity|iso:MEAN:VAR|ar1:MEAN:VAR:RHO
    #[arg(long, env = "GRAINFORGE_BACKEND")]
    pub backend: String,
    #[arg(long, default_value_t = 10)]
    pub resamples: usize,
    #[arg(long, default_value_t = 25)]
    pub tail: usize,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    /// Stop after this many batches; rerun to resume.
    #[arg(long)]
    pub stop_after_batches: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Ignore an existing manifest and start over.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_triplet<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid number {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let d: [usize; 3] = parse_triplet(s)?;
    if d.contains(&0) {
        return Err("dimensions must be positive".into());
    }
    Ok(d)
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_triplet(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = commands::Failure::user("usage", e.to_string().trim_end());
            f.report();
            return f.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            f.report();
            f.exit_code()
        }
    }
}
