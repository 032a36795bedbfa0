use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ganbank::datasets::{sha256_hex, Manifest};
use ganbank::forward_models::{encode_component, ForwardModel};
use ganbank::generators::{Discriminator, Generator};
use ganbank::image::{ColorSpace, ComponentImage};
use ganbank::{io, Error, Result};

pub const GENERATOR_FILE: &str = "generator.jinv";
pub const DISCRIMINATOR_FILE: &str = "discriminator.jinv";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const TRAIN_INFO_FILE: &str = "train.json";
pub const THREADS_ENV: &str = "JOIN_THREADS";

/// A generator argument may name the training output directory or the
/// checkpoint itself.
pub fn generator_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(GENERATOR_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn load_generator(p: &Path) -> Result<Generator> {
    let path = generator_path(p);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    Generator::load(path)
}

/// The discriminator saved next to a generator checkpoint.
pub fn load_discriminator(p: &Path) -> Result<Discriminator> {
    let path = generator_path(p).with_file_name(DISCRIMINATOR_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    Discriminator::load(path)
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Tone-mapped ground truth for a target that sits at
/// `<root>/scenes/<id>/composed.png` inside an exported dataset, in the
/// model's component order. `None` when the target is not part of one.
pub fn ground_truth(target: &Path, model: &ForwardModel) -> Result<Option<Vec<ComponentImage>>> {
    let Some(scene_dir) = target.parent() else { return Ok(None) };
    let Some(root) = scene_dir.parent().and_then(Path::parent) else { return Ok(None) };
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Ok(None);
    }
    let manifest: Manifest = io::read_json(&manifest_path)?;
    let id = scene_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let Some(entry) = manifest.scenes.iter().find(|s| s.id == id) else { return Ok(None) };
    model
        .tags()
        .iter()
        .map(|tag| {
            let name = format!("{tag}.pfm");
            let path = scene_dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if entry.sha256.get(&name) != Some(&sha256_hex(&bytes)) {
                return Err(Error::Checksum { path });
            }
            let img = io::parse_pfm(&bytes, &path)?;
            encode_component(&ComponentImage::new(img, ColorSpace::Linear, *tag)?)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Worker count: available cores, capped by `JOIN_THREADS` when set.
pub fn thread_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(cores),
        _ => cores,
    }
}

/// Applies `f` to every item on up to `threads` workers. Results keep the
/// input order, so output does not depend on scheduling.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..37).collect();
        for t in [1, 3, 8] {
            let ys = parallel_map(&xs, t, |x| Ok(x * x)).unwrap();
            assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn parallel_map_reports_errors() {
        let xs = [1, 2, 3];
        let r = parallel_map(&xs, 2, |&x| if x == 2 { Err(Error::EmptyDataset) } else { Ok(x) });
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
