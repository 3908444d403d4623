use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openexposure::anchor::{ChainExport, SimChain};
use openexposure::audit::run_full_audit;
use openexposure::blindsig::{InstituteKeyPair, Miid};
use openexposure::keys::IntervalNumber;
use openexposure::protocol::{verify_publication, LedgerTiming, Phone, PhoneState};
use openexposure::sim::{run, Scenario};
use openexposure::trace::{read_publication, AuditTrace, PublicationManifest, CHAIN_FILE, MANIFEST_FILE};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

const DETECTED: u8 = 2;

#[derive(Parser)]
#[command(name = "openexposure", version, about = "Exposure-notification simulator, auditor and verifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an institute RSA key pair.
    Keygen(KeygenArgs),
    /// Run a scenario and write its trace directory.
    Simulate(SimulateArgs),
    /// Audit a trace directory. Exits 2 when a violation is detected.
    Audit(AuditArgs),
    /// Check a publication against the chain. Exits 2 when it is rejected.
    Verify(VerifyArgs),
    /// Re-run exposure matching for a saved phone.
    Match(MatchArgs),
}

#[derive(Args)]
struct KeygenArgs {
    /// Institute identifier, 1 to 8 printable ASCII characters.
    #[arg(long)]
    miid: String,
    #[arg(long, default_value_t = 2048)]
    bits: usize,
    /// Deterministic key from a seed instead of the OS generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the key JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "OPENEXPOSURE_OUT_DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Compact single-line JSON.
    #[arg(long)]
    compact: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    publication: PathBuf,
    /// Chain export (`chain.json`).
    #[arg(long)]
    chain: PathBuf,
    /// Publication manifest supplying the ledger timing. Defaults to the
    /// `manifest.json` next to the publication.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    phone_state: PathBuf,
    /// Directory holding `manifest.json` and the epoch files.
    #[arg(long)]
    publications: PathBuf,
    /// Chain export. Defaults to `chain.json` in the parent of the publications directory.
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Only consider epochs newer than the phone's last download.
    #[arg(long)]
    only_new: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn print_json(value: &impl serde::Serialize, compact: bool) -> CliResult<()> {
    let text = if compact { serde_json::to_string(value)? } else { serde_json::to_string_pretty(value)? };
    println!("{text}");
    Ok(())
}

fn keygen(args: KeygenArgs) -> CliResult<u8> {
    let miid = Miid::new(&args.miid)?;
    let key = match args.seed {
        Some(seed) => InstituteKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed), args.bits, miid)?,
        None => InstituteKeyPair::generate(&mut OsRng, args.bits, miid)?,
    };
    let public = key.public_key();
    let out = json!({
        "miid": miid.as_str(),
        "bits": public.modulus().bits(),
        "public_key": hex::encode(public.to_bytes()),
        "n": public.modulus().to_str_radix(16),
        "e": public.exponent().to_str_radix(16),
        "d": key.private_exponent().to_str_radix(16),
    });
    match args.out {
        Some(path) => {
            fs::write(&path, serde_json::to_string_pretty(&out)? + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
            println!("{}", out["public_key"].as_str().unwrap_or_default());
        }
        None => print_json(&out, false)?,
    }
    Ok(0)
}

fn simulate(args: SimulateArgs) -> CliResult<u8> {
    let text = fs::read_to_string(&args.scenario).map_err(|e| format!("{}: {e}", args.scenario.display()))?;
    let mut scenario = Scenario::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let output = run(&scenario)?;
    output.write_dir(&args.out)?;
    let m = &output.metrics;
    print_json(
        &json!({
            "out": args.out,
            "seed": m.seed,
            "notifications": m.notifications_issued,
            "oracle_expected": m.oracle_expected,
            "precision": m.precision,
            "recall": m.recall,
            "publications": m.publications,
            "threat_events": m.threat_events,
        }),
        false,
    )?;
    Ok(0)
}

fn audit(args: AuditArgs) -> CliResult<u8> {
    let trace = AuditTrace::read_dir(&args.trace)?;
    let report = run_full_audit(&trace)?;
    print_json(&report, args.compact)?;
    Ok(if report.detected() { DETECTED } else { 0 })
}

fn verify(args: VerifyArgs) -> CliResult<u8> {
    let publication = read_publication(&args.publication)?;
    let chain = SimChain::from_export(&read_json::<ChainExport>(&args.chain)?)?;
    let manifest_path = args.manifest.unwrap_or_else(|| {
        args.publication.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE)
    });
    let manifest: PublicationManifest = read_json(&manifest_path)?;
    let timing: LedgerTiming = manifest.timing;
    let out = match verify_publication(&publication, &chain, &timing) {
        Ok(digests) => json!({
            "epoch_id": publication.epoch_id,
            "valid": true,
            "root": publication.root,
            "anchor_block": publication.anchor_block,
            "reports": publication.reports.len(),
            "digests": digests,
        }),
        Err(rejection) => json!({
            "epoch_id": publication.epoch_id,
            "valid": false,
            "reason": rejection.to_string(),
            "rejection": rejection,
        }),
    };
    print_json(&out, false)?;
    Ok(if out["valid"] == true { 0 } else { DETECTED })
}

fn match_phone(args: MatchArgs) -> CliResult<u8> {
    let mut state: PhoneState = read_json(&args.phone_state)?;
    if !args.only_new {
        state.last_download_epoch = None;
    }
    let (manifest, publications) = PublicationManifest::read_dir(&args.publications)?;
    let chain_path = args.chain.unwrap_or_else(|| {
        args.publications.parent().unwrap_or(Path::new(".")).join(CHAIN_FILE)
    });
    let chain = SimChain::from_export(&read_json::<ChainExport>(&chain_path)?)?;
    let now: IntervalNumber = state.saved_at;
    let mut phone = Phone::from_state(&state);
    let outcome = phone.download_and_match(&publications, &chain, &manifest.timing, now);
    print_json(
        &json!({
            "phone": state.agent,
            "checked_epochs": outcome.checked,
            "rejected": outcome.rejected.iter().map(|(e, r)| json!({"epoch_id": e, "reason": r.to_string()})).collect::<Vec<_>>(),
            "notifications": outcome.notifications,
        }),
        false,
    )?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen(a) => keygen(a),
        Command::Simulate(a) => simulate(a),
        Command::Audit(a) => audit(a),
        Command::Verify(a) => verify(a),
        Command::Match(a) => match_phone(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
