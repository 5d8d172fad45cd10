//! Deterministic synthetic benchmark: class-incremental task streams over
//! procedurally rendered toy images, with optional covariate domain shifts
//! applied to training data only. Generation is a pure function of
//! (spec, seed).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::subseed;
use crate::vit::shuffle;

/// Number of distinct label-preserving rendering transforms available.
pub const NUM_TRANSFORMS: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub num_tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub num_domains: usize,
    pub image_size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_classes: 20,
            num_tasks: 5,
            train_per_class: 100,
            test_per_class: 40,
            num_domains: 6,
            image_size: 16,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_tasks == 0 || self.num_classes % self.num_tasks != 0 {
            problems.push(format!(
                "num_classes {} must be divisible by num_tasks {}",
                self.num_classes, self.num_tasks
            ));
        }
        if self.num_domains == 0 || self.num_domains > NUM_TRANSFORMS {
            problems.push(format!(
                "num_domains {} must be in [1, {NUM_TRANSFORMS}]",
                self.num_domains
            ));
        }
        if self.train_per_class < 5 {
            problems.push("train_per_class must be at least 5 (20% validation carve-out)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub image: Vec<f64>,
    pub class_id: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub class_ids: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub seed: u64,
    /// Class ids in discovery order; position in this list is the label
    /// index used by the growing classifier head.
    pub class_order: Vec<usize>,
    pub num_domains: usize,
    pub image_size: usize,
}

impl TaskStream {
    /// Label index of a class id (its position in discovery order).
    pub fn label_of(&self, class_id: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class_id)
    }

    pub fn all_class_ids(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.class_ids.iter().copied()).collect()
    }
}

/// Deterministic per-class base template: a mix of two oriented sinusoidal
/// gratings and a smooth radial bump, normalized to [0,1]. Distinct class
/// ids draw distinct parameters.
pub fn class_template(class_id: usize, size: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(0x74656d70, class_id as u64));
    let theta1: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq1: f64 = rng.random_range(0.5..2.5);
    let phase1: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let theta2: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq2: f64 = rng.random_range(0.5..2.5);
    let phase2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let cx: f64 = rng.random_range(0.2..0.8);
    let cy: f64 = rng.random_range(0.2..0.8);
    let sigma: f64 = rng.random_range(0.1..0.3);
    let bump_w: f64 = rng.random_range(-1.0..1.0);

    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let g1 = (std::f64::consts::TAU * freq1 * (u * theta1.cos() + v * theta1.sin()) + phase1).sin();
            let g2 = (std::f64::consts::TAU * freq2 * (u * theta2.cos() + v * theta2.sin()) + phase2).sin();
            let r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
            let bump = bump_w * (-r2 / (2.0 * sigma * sigma)).exp();
            img.push(g1 + 0.7 * g2 + 1.5 * bump);
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    img.iter().map(|x| (x - lo) / span).collect()
}

/// Label-preserving covariate transform for a domain index.
pub fn apply_domain(image: &[f64], size: usize, domain: usize) -> Vec<f64> {
    assert!(domain < NUM_TRANSFORMS, "domain {domain} out of range");
    let clamp = |x: f64| x.clamp(0.0, 1.0);
    match domain {
        0 => image.to_vec(),
        1 => image.iter().map(|x| 1.0 - x).collect(),
        2 => image.iter().map(|x| clamp(0.5 + (x - 0.5) * 1.8)).collect(),
        3 => image.iter().map(|x| clamp(x + 0.35)).collect(),
        4 => image
            .iter()
            .enumerate()
            .map(|(i, x)| if (i / size) % 2 == 0 { x * 0.35 } else { *x })
            .collect(),
        5 => box_blur(image, size),
        6 => {
            let mut out = vec![0.0; size * size];
            for y in 0..size {
                out[(size - 1 - y) * size..(size - y) * size]
                    .copy_from_slice(&image[y * size..(y + 1) * size]);
            }
            out
        }
        7 => {
            let mut out = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    out[x * size + y] = image[y * size + x];
                }
            }
            out
        }
        8 => image.iter().map(|x| clamp(0.5 + (x - 0.5) * 0.4)).collect(),
        9 => image
            .iter()
            .enumerate()
            .map(|(i, x)| if (i % size) % 2 == 0 { x * 0.35 } else { *x })
            .collect(),
        10 => image
            .iter()
            .enumerate()
            .map(|(i, x)| if ((i / size) + (i % size)) % 2 == 0 { x * 0.5 } else { *x })
            .collect(),
        11 => image.iter().map(|x| x * x).collect(),
        _ => unreachable!(),
    }
}

fn box_blur(image: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && ny < size as i64 && nx >= 0 && nx < size as i64 {
                        acc += image[ny as usize * size + nx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y * size + x] = acc / count;
        }
    }
    out
}

/// Render one sample: template, plus per-sample pixel noise and brightness
/// jitter, then the domain transform.
pub fn render_sample(class_id: usize, domain: usize, sample_idx: u64, size: usize) -> Sample {
    let template = class_template(class_id, size);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(
        subseed(0x73616d70, class_id as u64),
        (domain as u64) << 32 | sample_idx,
    ));
    let brightness: f64 = rng.random_range(-0.06..0.06);
    let jittered: Vec<f64> = template
        .iter()
        .map(|x| (x + brightness + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
        .collect();
    Sample { image: apply_domain(&jittered, size, domain), class_id, domain }
}

fn generate_class_samples(class_id: usize, spec: &BenchmarkSpec) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..spec.train_per_class {
        let s = render_sample(class_id, i % spec.num_domains, i as u64, spec.image_size);
        // every fifth sample is validation: a fixed 20% carve-out
        if i % 5 == 4 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    let test = (0..spec.test_per_class)
        .map(|i| {
            render_sample(class_id, i % spec.num_domains, 1_000_000 + i as u64, spec.image_size)
        })
        .collect();
    (train, val, test)
}

/// Build a class-incremental stream: classes shuffled by seed, partitioned
/// into equal disjoint tasks, samples rendered per domain with fixed
/// splits.
pub fn generate_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let mut class_order: Vec<usize> = (0..spec.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x6f72646572)); // "order"
    shuffle(&mut class_order, &mut rng);
    let per_task = spec.num_classes / spec.num_tasks;
    let tasks = class_order
        .chunks(per_task)
        .map(|ids| {
            let mut task = Task { class_ids: ids.to_vec(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
            for &cid in ids {
                let (tr, va, te) = generate_class_samples(cid, spec);
                task.train.extend(tr);
                task.val.extend(va);
                task.test.extend(te);
            }
            task
        })
        .collect();
    Ok(TaskStream {
        tasks,
        seed,
        class_order,
        num_domains: spec.num_domains,
        image_size: spec.image_size,
    })
}

/// Dual-shift protocol: per task, remove an independent random subset of
/// ⌊fraction·num_domains⌋ domains from the train and val splits. Test
/// splits keep all domains.
pub fn apply_dual_shift(stream: &TaskStream, fraction_removed: f64, seed: u64) -> Result<TaskStream> {
    if !(0.0..1.0).contains(&fraction_removed) {
        return Err(Error::Config(format!(
            "fraction_removed {fraction_removed} must be in [0, 1)"
        )));
    }
    let remove_count = (fraction_removed * stream.num_domains as f64).floor() as usize;
    if remove_count >= stream.num_domains {
        return Err(Error::Config("dual shift would remove every domain".into()));
    }
    let mut out = stream.clone();
    for (t, task) in out.tasks.iter_mut().enumerate() {
        let mut domains: Vec<usize> = (0..stream.num_domains).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x7368696674 + t as u64));
        shuffle(&mut domains, &mut rng);
        let removed: Vec<usize> = domains[..remove_count].to_vec();
        task.train.retain(|s| !removed.contains(&s.domain));
        task.val.retain(|s| !removed.contains(&s.domain));
        if task.train.is_empty() {
            return Err(Error::Benchmark(format!(
                "domain removal emptied the training split of task {t}"
            )));
        }
    }
    Ok(out)
}

/// Single-task stream over pretext classes for encoder pretraining. Class
/// ids start after the benchmark ids so templates never collide.
pub fn pretext_split(spec: &BenchmarkSpec, num_pretext_classes: usize, seed: u64) -> Result<TaskStream> {
    if num_pretext_classes == 0 {
        return Err(Error::Config("need at least one pretext class".into()));
    }
    let ids: Vec<usize> = (0..num_pretext_classes).map(|i| spec.num_classes + i).collect();
    for id in &ids {
        if *id < spec.num_classes {
            return Err(Error::Benchmark(format!("pretext class id {id} collides with benchmark ids")));
        }
    }
    let mut task = Task { class_ids: ids.clone(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for &cid in &ids {
        let (tr, va, te) = generate_class_samples(cid, spec);
        task.train.extend(tr);
        task.val.extend(va);
        task.test.extend(te);
    }
    Ok(TaskStream {
        tasks: vec![task],
        seed,
        class_order: ids,
        num_domains: spec.num_domains,
        image_size: spec.image_size,
    })
}

// ── Binary container ────────────────────────────────────────────────
//
// Layout (all integers little-endian):
//   magic "PCLB", u32 version (1), u64 seed,
//   u32 image_size, u32 num_domains,
//   u32 class_order length, u32 class ids...,
//   u32 num_tasks, then per task:
//     u32 class id count, u32 ids...,
//     3 splits (train, val, test), each: u32 sample count, then per
//     sample: u32 class_id, u32 domain, u32 pixel count, f64 pixels.

const MAGIC: &[u8; 4] = b"PCLB";
const VERSION: u32 = 1;

pub fn write_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&stream.seed.to_le_bytes())?;
    w.write_all(&(stream.image_size as u32).to_le_bytes())?;
    w.write_all(&(stream.num_domains as u32).to_le_bytes())?;
    w.write_all(&(stream.class_order.len() as u32).to_le_bytes())?;
    for c in &stream.class_order {
        w.write_all(&(*c as u32).to_le_bytes())?;
    }
    w.write_all(&(stream.tasks.len() as u32).to_le_bytes())?;
    for task in &stream.tasks {
        w.write_all(&(task.class_ids.len() as u32).to_le_bytes())?;
        for c in &task.class_ids {
            w.write_all(&(*c as u32).to_le_bytes())?;
        }
        for split in [&task.train, &task.val, &task.test] {
            w.write_all(&(split.len() as u32).to_le_bytes())?;
            for s in split {
                w.write_all(&(s.class_id as u32).to_le_bytes())?;
                w.write_all(&(s.domain as u32).to_le_bytes())?;
                w.write_all(&(s.image.len() as u32).to_le_bytes())?;
                for px in &s.image {
                    w.write_all(&px.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<TaskStream> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a benchmark container (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let image_size = read_u32(&mut r)? as usize;
    let num_domains = read_u32(&mut r)? as usize;
    let order_len = read_u32(&mut r)? as usize;
    let class_order = (0..order_len).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let num_tasks = read_u32(&mut r)? as usize;
    let mut tasks = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let id_count = read_u32(&mut r)? as usize;
        let class_ids = (0..id_count).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = read_u32(&mut r)? as usize;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let class_id = read_u32(&mut r)? as usize;
                let domain = read_u32(&mut r)? as usize;
                let px_count = read_u32(&mut r)? as usize;
                let mut image = Vec::with_capacity(px_count);
                for _ in 0..px_count {
                    let mut buf = [0u8; 8];
                    r.read_exact(&mut buf)?;
                    image.push(f64::from_le_bytes(buf));
                }
                samples.push(Sample { image, class_id, domain });
            }
            splits.push(samples);
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        tasks.push(Task { class_ids, train, val, test });
    }
    Ok(TaskStream { tasks, seed, class_order, num_domains, image_size })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Human-readable manifest: seeds, split sizes, and per-task checksums of
/// the sample payloads.
pub fn write_manifest(stream: &TaskStream, spec: &BenchmarkSpec, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("benchmark manifest v1\n");
    out.push_str(&format!("seed: {}\n", stream.seed));
    out.push_str(&format!(
        "spec: classes={} tasks={} train_per_class={} test_per_class={} domains={} image={}x{}\n",
        spec.num_classes,
        spec.num_tasks,
        spec.train_per_class,
        spec.test_per_class,
        spec.num_domains,
        spec.image_size,
        spec.image_size
    ));
    out.push_str(&format!("class_order: {:?}\n", stream.class_order));
    for (t, task) in stream.tasks.iter().enumerate() {
        let mut hasher = Sha256::new();
        for split in [&task.train, &task.val, &task.test] {
            for s in split {
                for px in &s.image {
                    hasher.update(px.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        out.push_str(&format!(
            "task {t}: classes={:?} train={} val={} test={} sha256={}\n",
            task.class_ids,
            task.train.len(),
            task.val.len(),
            task.test.len(),
            hex_string(&digest)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
