//! Synthetic dataset generation and the JSON manifest that indexes it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxmamba::metrics::LabelVolume;
use voxmamba::synth::{generate, SynthTaskSpec};
use voxmamba::volume::Volume;
use voxmamba::{Error, Result, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "voxmamba-manifest/1";

#[derive(Clone, Debug)]
pub struct GenArgs {
    pub spec: SynthTaskSpec,
    /// Total number of image/label pairs.
    pub n: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// Generator index of this pair.
    pub index: u64,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub labels: String,
    pub image_sha256: String,
    pub labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: SynthTaskSpec,
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
    pub test: Vec<Entry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

/// Sizes of the (train, val, test) splits: one eighth each for validation
/// and test (at least one), the rest for training.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 pairs for train/val/test, got {n}")));
    }
    let held = (n / 8).max(1);
    Ok((n - 2 * held, held, held))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `n` pairs as `{split}/{index:05}_{image,labels}.vxm` plus
/// `manifest.json`. Everything is validated before the first write.
pub fn cmd_gen(args: &GenArgs) -> Result<Manifest> {
    args.spec.validate()?;
    let (n_train, n_val, _) = split_sizes(args.n)?;
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: args.spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for index in 0..args.n as u64 {
        let (split, list) = if (index as usize) < n_train {
            ("train", &mut manifest.train)
        } else if (index as usize) < n_train + n_val {
            ("val", &mut manifest.val)
        } else {
            ("test", &mut manifest.test)
        };
        let sample = generate(&args.spec, index)?;
        let dir = args.out.join(split);
        fs::create_dir_all(&dir)?;
        let image = format!("{split}/{index:05}_image.vxm");
        let labels = format!("{split}/{index:05}_labels.vxm");
        let ib = Volume::image(sample.image).to_bytes()?;
        let lb = Volume::labels(&sample.labels).to_bytes()?;
        fs::write(args.out.join(&image), &ib)?;
        fs::write(args.out.join(&labels), &lb)?;
        list.push(Entry {
            index,
            image,
            labels,
            image_sha256: sha256_hex(&ib),
            labels_sha256: sha256_hex(&lb),
        });
    }
    fs::write(args.out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

impl Manifest {
    /// Reads a manifest from a file or from a directory containing one.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let m: Manifest = serde_json::from_slice(&fs::read(&file)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("{}: unsupported manifest format {:?}", file.display(), m.format)));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, root))
    }

    pub fn entries(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One loaded pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub index: u64,
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

fn read_checked(root: &Path, rel: &str, sha256: &str) -> Result<Volume> {
    let bytes = fs::read(root.join(rel))?;
    let got = sha256_hex(&bytes);
    if got != sha256 {
        return Err(Error::Format { offset: 0, msg: format!("{rel}: sha256 {got} does not match manifest {sha256}") });
    }
    Volume::from_bytes(&bytes)
}

pub fn load_pair(root: &Path, e: &Entry, classes: usize) -> Result<Pair> {
    Ok(Pair {
        index: e.index,
        image: read_checked(root, &e.image, &e.image_sha256)?.into_image()?,
        labels: read_checked(root, &e.labels, &e.labels_sha256)?.into_labels(classes)?,
    })
}

pub fn load_split(m: &Manifest, root: &Path, split: Split) -> Result<Vec<Pair>> {
    m.entries(split).iter().map(|e| load_pair(root, e, m.spec.classes)).collect()
}
