//! JSON Lines on-disk format: one manifest line, then one object per shot.
//! serde_json already emits shortest round-trip float literals.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusManifest, Movie, Result, Shot, FORMAT_VERSION};

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    manifest: CorpusManifest,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ShotLine {
    movie_id: String,
    shot_idx: usize,
    video_feat: Vec<f32>,
    audio_feat: Vec<f32>,
    tokens: Vec<Vec<f32>>,
    class_id: usize,
    engagement: f32,
    latent: Vec<f32>,
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = ManifestLine {
        manifest: corpus.manifest.clone(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(to_format_err)?;
    w.write_all(b"\n")?;
    for movie in &corpus.movies {
        for (shot_idx, shot) in movie.shots.iter().enumerate() {
            let line = ShotLine {
                movie_id: movie.id.clone(),
                shot_idx,
                video_feat: shot.video.clone(),
                audio_feat: shot.audio.clone(),
                tokens: shot.tokens.clone(),
                class_id: movie.class_id,
                engagement: movie.engagement,
                latent: shot.latent.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(to_format_err)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CorpusError::Format("empty file".into()))??;
    let header: ManifestLine = serde_json::from_str(&first).map_err(to_format_err)?;
    if header.version != FORMAT_VERSION {
        return Err(CorpusError::Format(format!(
            "unsupported corpus version {}",
            header.version
        )));
    }
    let mut movies: Vec<Movie> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let shot: ShotLine = serde_json::from_str(&line).map_err(|e| {
            CorpusError::Format(format!("shot line {}: {e}", lineno + 2))
        })?;
        let needs_new_movie = movies.last().is_none_or(|m| m.id != shot.movie_id);
        if needs_new_movie {
            movies.push(Movie {
                id: shot.movie_id.clone(),
                shots: Vec::new(),
                class_id: shot.class_id,
                engagement: shot.engagement,
            });
        }
        let movie = movies.last_mut().expect("just pushed");
        if shot.shot_idx != movie.shots.len() {
            return Err(CorpusError::Format(format!(
                "movie {} shot index {} out of order (expected {})",
                shot.movie_id,
                shot.shot_idx,
                movie.shots.len()
            )));
        }
        movie.shots.push(Shot {
            video: shot.video_feat,
            audio: shot.audio_feat,
            tokens: shot.tokens,
            latent: shot.latent,
        });
    }
    if movies.is_empty() {
        return Err(CorpusError::Empty("corpus file has no shots".into()));
    }
    Ok(Corpus {
        manifest: header.manifest,
        movies,
    })
}

fn to_format_err(e: serde_json::Error) -> CorpusError {
    CorpusError::Format(e.to_string())
}
