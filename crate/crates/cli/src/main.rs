use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blendvoice::decoder::BlendshapeSequence;
use blendvoice::esmm::StyleLibrary;
use blendvoice::losses::DisOrientation;
use blendvoice::mesh::{self, BlendshapeBasis, TriangleMesh};
use blendvoice::metrics::{self, RegionConfig};
use blendvoice::signal::AudioClip;
use blendvoice::synthdata::{self, CorpusSpec};
use blendvoice::training::{self, Checkpoint, TrainConfig, LIBRARY_FILE};
use blendvoice::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

/// Files `synth-data` adds next to the corpus for the mesh commands.
const BASIS_DIR: &str = "basis";
const TARGET_FACE: &str = "face_target.obj";
const CORRESPONDENCE: &str = "correspondence.json";

#[derive(Parser)]
#[command(name = "blendvoice", version, about = "Speech to blendshape animation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Orientation {
    Corrected,
    Literal,
}

impl From<Orientation> for DisOrientation {
    fn from(o: Orientation) -> Self {
        match o {
            Orientation::Corrected => DisOrientation::Corrected,
            Orientation::Literal => DisOrientation::Literal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, plus a face basis for the mesh commands.
    SynthData {
        /// Corpus spec JSON.
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the corpus JSON.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and write checkpoint, style library and training log.
    Train {
        manifest: PathBuf,
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        dis_orientation: Option<Orientation>,
    },
    /// Rebuild the style library of a checkpoint over a manifest.
    BuildLibrary {
        manifest: PathBuf,
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint>/library.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audio to blendshape CSV. With a directory input, every `*.wav` is
    /// converted into `<output>/<stem>.csv`.
    Infer {
        checkpoint: PathBuf,
        library: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Savitzky-Golay smooth the output.
        #[arg(long)]
        smooth: bool,
    },
    /// Score predicted CSVs against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Region config JSON.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Mesh basis for vertex metrics; the built-in synthetic face otherwise.
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Directory holding `<clip>.wav` for beat alignment.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Blendshape CSV to one OBJ per frame.
    ConvertMesh {
        basis: PathBuf,
        coeffs: PathBuf,
        out: PathBuf,
    },
    /// Deformation-transfer a basis onto a new neutral mesh.
    Transfer {
        src_basis: PathBuf,
        tgt_neutral: PathBuf,
        correspondence: PathBuf,
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = read_text(spec)?;
    let mut spec: CorpusSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let manifest = synthdata::generate_corpus(&spec, out)?;
    mesh::synthetic_basis().save_dir(&out.join(BASIS_DIR))?;
    let target = mesh::synthetic_target_face();
    target.write_obj(&out.join(TARGET_FACE))?;
    let corr: Vec<usize> = (0..target.num_triangles()).collect();
    write_text(
        &out.join(CORRESPONDENCE),
        &serde_json::to_string(&corr).expect("indices serialize"),
    )?;
    info!("wrote {} clips to {}", manifest.len(), out.display());
    Ok(())
}

fn train(
    manifest: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    orientation: Option<Orientation>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = orientation {
        cfg.dis_orientation = o.into();
    }
    let manifest = synthdata::load_manifest(manifest)?;
    let trainer = training::train_to_dir(&manifest, &cfg, out)?;
    if let Some(last) = trainer.log.last() {
        info!("step {} L_total {:.6}", last.step, last.total);
    }
    Ok(())
}

fn build_library(manifest: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let manifest = synthdata::load_manifest(manifest)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let lib = training::build_library(&manifest, &ckpt)?;
    lib.save(out)?;
    info!("library with {} entries at {}", lib.len(), out.display());
    Ok(())
}

fn infer(ckpt: &Path, library: &Path, input: &Path, output: &Path, smooth: bool) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let library = StyleLibrary::load(library)?;
    ckpt.check_library(&library)?;
    let run = |wav: &Path, csv: &Path| -> Result<()> {
        let clip = AudioClip::read_wav(wav)?;
        training::infer(&clip, &ckpt.model, &library, smooth)?.write_csv(csv)
    };
    if input.is_dir() {
        create_dir(output)?;
        let mut wavs: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::Io {
                path: input.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        for wav in &wavs {
            let stem = wav.file_stem().expect("wav file has a stem");
            run(wav, &output.join(stem).with_extension("csv"))?;
        }
        info!("inferred {} clips", wavs.len());
        Ok(())
    } else {
        run(input, output)
    }
}

fn eval(
    pred: &Path,
    gt: &Path,
    regions: Option<&Path>,
    basis: Option<&Path>,
    audio: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let regions = match regions {
        Some(p) => RegionConfig::from_json(&read_text(p)?)?,
        None => RegionConfig::default(),
    };
    let basis = match basis {
        Some(p) => BlendshapeBasis::load_dir(p)?,
        None => mesh::synthetic_basis(),
    };
    let report = metrics::evaluate_dirs(pred, gt, &regions, Some(&basis), audio)?;
    report.write(out)?;
    info!("scored {} clips", report.clips.len());
    Ok(())
}

fn convert_mesh(basis: &Path, coeffs: &Path, out: &Path) -> Result<()> {
    let basis = BlendshapeBasis::load_dir(basis)?;
    let seq = BlendshapeSequence::read_csv(coeffs)?;
    let traj = mesh::apply_blendshapes(&basis, &seq)?;
    create_dir(out)?;
    for (t, frame) in traj.outer_iter().enumerate() {
        let m = basis.neutral.with_vertices(frame.to_owned())?;
        m.write_obj(&out.join(format!("frame_{t:05}.obj")))?;
    }
    info!("wrote {} frames", seq.frames());
    Ok(())
}

fn transfer(src: &Path, tgt: &Path, corr: &Path, out: &Path) -> Result<()> {
    let src = BlendshapeBasis::load_dir(src)?;
    let mut target = TriangleMesh::read_obj(tgt)?;
    if target.same_topology(&src.neutral) {
        target.region_masks = src.neutral.region_masks.clone();
    }
    let corr = mesh::read_correspondence(corr)?;
    mesh::build_templates(&src, &target, &corr)?.save_dir(out)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { spec, out, seed } => synth_data(&spec, &out, seed),
        Command::Train {
            manifest,
            config,
            out,
            seed,
            dis_orientation,
        } => train(&manifest, config.as_deref(), &out, seed, dis_orientation),
        Command::BuildLibrary {
            manifest,
            checkpoint,
            out,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.join(LIBRARY_FILE));
            build_library(&manifest, &checkpoint, &out)
        }
        Command::Infer {
            checkpoint,
            library,
            input,
            output,
            smooth,
        } => infer(&checkpoint, &library, &input, &output, smooth),
        Command::Eval {
            pred_dir,
            gt_dir,
            regions,
            basis,
            audio,
            out,
        } => eval(
            &pred_dir,
            &gt_dir,
            regions.as_deref(),
            basis.as_deref(),
            audio.as_deref(),
            &out,
        ),
        Command::ConvertMesh { basis, coeffs, out } => convert_mesh(&basis, &coeffs, &out),
        Command::Transfer {
            src_basis,
            tgt_neutral,
            correspondence,
            out,
        } => transfer(&src_basis, &tgt_neutral, &correspondence, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
