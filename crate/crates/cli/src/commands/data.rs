use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gfm_core::container::{self, ContainerReader, Group};
use gfm_core::elements::symbol;
use gfm_core::preprocess::{
    filter_by_force_norm, fit_per_source, generate_synthetic, ingest_extxyz, realign_per_source, split_dataset,
    write_extxyz, SyntheticConfig,
};
use gfm_core::GraphRecord;
use gfm_runtime::launch::{run_thread_ranks, DataSource, StoreOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use tracing::info;

use crate::cli::{recheck, BenchIoArgs, GenerateArgs, PreprocessArgs, WriteContainerArgs};
use crate::config::{DataConfig, PipelineConfig};
use crate::util::{claim_outputs, usage, write_json};

fn synthetic(d: &DataConfig) -> SyntheticConfig {
    SyntheticConfig {
        count: d.count,
        n_atoms_range: d.n_atoms_range,
        element_distribution: d.elements.clone(),
        box_length: d.box_length,
        cutoff_radius: d.cutoff_radius,
        seed: d.seed,
        source_tag: d.source_tag.clone(),
        ..Default::default()
    }
}

pub fn generate(mut cfg: PipelineConfig, a: GenerateArgs) -> Result<()> {
    let d = &mut cfg.data;
    d.count = a.count.unwrap_or(d.count);
    d.n_atoms_range = a.atoms.unwrap_or(d.n_atoms_range);
    d.seed = a.seed.unwrap_or(d.seed);
    d.box_length = a.box_length.unwrap_or(d.box_length);
    d.cutoff_radius = a.cutoff.unwrap_or(d.cutoff_radius);
    if let Some(t) = a.source_tag {
        d.source_tag = t;
    }
    recheck(&cfg)?;
    claim_outputs(&[&a.out.out], a.out.force)?;
    let records = generate_synthetic(&synthetic(&cfg.data))?;
    let f = File::create(&a.out.out).with_context(|| format!("creating {}", a.out.out.display()))?;
    write_extxyz(&records, cfg.data.cutoff_radius, BufWriter::new(f))?;
    info!(event = "generated", records = records.len(), path = %a.out.out.display());
    Ok(())
}

fn split_into_groups(
    records: Vec<GraphRecord>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<Group, Vec<GraphRecord>>> {
    let split = split_dataset(records.len(), ratios, seed)?;
    Ok(split.apply(records))
}

fn group_sizes(groups: &BTreeMap<Group, Vec<GraphRecord>>) -> BTreeMap<&'static str, usize> {
    Group::ALL.iter().map(|g| (g.name(), groups.get(g).map_or(0, Vec::len))).collect()
}

pub fn preprocess(mut cfg: PipelineConfig, a: PreprocessArgs) -> Result<()> {
    let d = &mut cfg.data;
    d.filter_threshold = a.filter_threshold.unwrap_or(d.filter_threshold);
    if a.realign {
        d.realign = true;
    }
    if a.no_realign {
        d.realign = false;
    }
    d.split = a.split.unwrap_or(d.split);
    d.seed = a.seed.unwrap_or(d.seed);
    d.subfiles = a.subfiles.unwrap_or(d.subfiles);
    recheck(&cfg)?;
    let d = &cfg.data;
    let records = if a.input == "synthetic" {
        generate_synthetic(&synthetic(d))?
    } else {
        let p = Path::new(&a.input);
        if !p.is_file() {
            return Err(usage(format!("--in {}: no such file (or use `synthetic`)", a.input)));
        }
        ingest_extxyz(p).with_context(|| format!("reading {}", a.input))?
    };
    claim_outputs(&[&a.out.out], a.out.force)?;
    let records_in = records.len();
    let (kept, removed) = filter_by_force_norm(records, d.filter_threshold);
    info!(event = "filtered", removed, kept = kept.len(), threshold = d.filter_threshold);
    let (records, tables) = if d.realign {
        let tables = fit_per_source(&kept);
        (realign_per_source(kept, &tables), tables)
    } else {
        (kept, BTreeMap::new())
    };
    let groups = split_into_groups(records, d.split, d.seed)?;
    container::write_container(&groups, d.subfiles, &a.out.out)?;
    // only the elements present carry a fitted coefficient
    let reference: BTreeMap<&String, BTreeMap<&str, f64>> = tables
        .iter()
        .map(|(tag, t)| {
            let c = (1..=gfm_core::elements::MAX_Z as u8)
                .filter(|&z| t.coefficient(z) != 0.0)
                .map(|z| (symbol(z).unwrap_or("?"), t.coefficient(z)))
                .collect();
            (tag, c)
        })
        .collect();
    let summary = json!({
        "records_in": records_in,
        "removed": removed,
        "realigned": d.realign,
        "reference_energies": reference,
        "groups": group_sizes(&groups),
        "subfiles": d.subfiles,
        "container": a.out.out,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn is_container(p: &Path) -> bool {
    p.join(container::MANIFEST_FILE).is_file()
}

pub fn write_container(mut cfg: PipelineConfig, a: WriteContainerArgs) -> Result<()> {
    cfg.data.subfiles = a.subfiles.unwrap_or(cfg.data.subfiles);
    cfg.data.split = a.split.unwrap_or(cfg.data.split);
    cfg.data.seed = a.seed.unwrap_or(cfg.data.seed);
    recheck(&cfg)?;
    if a.input == a.out.out {
        return Err(usage("--in and --out must differ"));
    }
    let groups = if is_container(&a.input) {
        let reader = ContainerReader::open(&a.input)?;
        Group::ALL.iter().map(|&g| Ok((g, reader.read_group(g)?))).collect::<Result<BTreeMap<_, _>>>()?
    } else if a.input.is_file() {
        let records = ingest_extxyz(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        split_into_groups(records, cfg.data.split, cfg.data.seed)?
    } else {
        return Err(usage(format!("--in {}: neither a container nor a file", a.input.display())));
    };
    claim_outputs(&[&a.out.out], a.out.force)?;
    let manifest = container::write_container(&groups, cfg.data.subfiles, &a.out.out)?;
    let summary = json!({
        "container": a.out.out,
        "subfiles": manifest.subfile_count,
        "total_records": manifest.total_records,
        "groups": group_sizes(&groups),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReadRow {
    readers: usize,
    seconds: f64,
    bytes: u64,
    mb_per_s: f64,
    matches_serial: bool,
}

#[derive(Debug, Serialize)]
struct Latency {
    fetches: usize,
    ranks: usize,
    /// Fetches of records this rank holds.
    local_fetch_mean_s: f64,
    /// Uniform random indices, so mostly remote for more than one rank.
    store_fetch_mean_s: f64,
    /// One container read per record, same indices.
    file_read_mean_s: f64,
}

pub fn bench_io(_cfg: PipelineConfig, a: BenchIoArgs) -> Result<()> {
    if a.readers.0.contains(&0) || a.ranks == 0 || a.fetches == 0 {
        return Err(usage("--readers, --ranks and --fetches must be positive"));
    }
    claim_outputs(&[&a.out.out], a.out.force)?;
    let reader = ContainerReader::open(&a.container)?;
    let n = reader.manifest().record_count(a.group);
    if n == 0 {
        bail!("group {} of {} is empty", a.group, a.container.display());
    }
    // the serial read doubles as the warm-up that fills the page cache
    let serial = reader.read_group(a.group)?;
    let mut reads = Vec::new();
    for &r in &a.readers.0 {
        let t = Instant::now();
        let parts = reader.read_parallel(a.group, r)?;
        let seconds = t.elapsed().as_secs_f64();
        let all: Vec<GraphRecord> = parts.into_iter().flatten().collect();
        let bytes: u64 = all.iter().map(|x| x.encoded_len() as u64).sum();
        let row = ReadRow { readers: r, seconds, bytes, mb_per_s: bytes as f64 / 1e6 / seconds, matches_serial: all == serial };
        info!(event = "parallel_read", readers = r, seconds, mb_per_s = row.mb_per_s);
        reads.push(row);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let indices: Vec<usize> = (0..a.fetches).map(|_| rng.gen_range(0..n)).collect();
    let opts = StoreOptions { groups: vec![a.group], ..Default::default() };
    let (local, store) = run_thread_ranks(&DataSource::Container(&reader), a.ranks, &opts, |env| {
        if env.store.rank() != 0 {
            return Ok((0.0, 0.0));
        }
        let owned = env.store.ownership(a.group).map(|o| o.owned(0)).unwrap_or_default();
        let t = Instant::now();
        for i in 0..a.fetches {
            std::hint::black_box(env.store.fetch(a.group, owned[i % owned.len()])?);
        }
        let local = t.elapsed().as_secs_f64() / a.fetches as f64;
        let t = Instant::now();
        for &i in &indices {
            std::hint::black_box(env.store.fetch(a.group, i)?);
        }
        Ok::<_, gfm_runtime::ddstore::StoreError>((local, t.elapsed().as_secs_f64() / a.fetches as f64))
    })?
    .remove(0)?;
    let t = Instant::now();
    for &i in &indices {
        std::hint::black_box(reader.read_record(a.group, i)?);
    }
    let file = t.elapsed().as_secs_f64() / a.fetches as f64;
    let latency = Latency {
        fetches: a.fetches,
        ranks: a.ranks,
        local_fetch_mean_s: local,
        store_fetch_mean_s: store,
        file_read_mean_s: file,
    };
    info!(event = "fetch_latency", local, store, file);
    let report = json!({
        "container": a.container,
        "group": a.group,
        "records": n,
        "subfiles": reader.manifest().subfile_count,
        "parallel_reads": reads,
        "latency": latency,
    });
    write_json(&a.out.out, &report)
}
