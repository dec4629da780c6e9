use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nilm_core::{Error, Result};

/// Output files staged under temporary names and renamed into place only on
/// [`Staging::commit`]. Dropping an uncommitted staging area removes every
/// temporary file, and the output directory if this run created it.
pub struct Staging {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.partial"));
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.files.push((tmp, target));
        Ok(BufWriter::new(file))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(bytes).map_err(|e| Error::io(self.dir.join(name), e))?;
        finish(w, &self.dir.join(name))
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for (tmp, target) in &self.files {
            std::fs::rename(tmp, target).map_err(|e| Error::io(target, e))?;
        }
        self.committed = true;
        Ok(self.files.iter().map(|(_, t)| t.clone()).collect())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (tmp, _) in &self.files {
            let _ = std::fs::remove_file(tmp);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

pub fn finish(w: BufWriter<File>, path: &Path) -> Result<()> {
    let file = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}
