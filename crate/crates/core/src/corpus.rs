//! In-memory playlist corpus: songs, artists, users, playlists and their
//! membership, plus the comma-separated file formats used to load it.
//!
//! Dense indices are assigned by lexicographic order of the external string
//! ids, so loading the same files always yields the same indexing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Dense zero-based index of a ", $what, ".")]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}#{}", $what, self.0)
            }
        }
    };
}

dense_id!(SongId, "song");
dense_id!(ArtistId, "artist");
dense_id!(UserId, "user");
dense_id!(PlaylistId, "playlist");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Song {
    pub external_id: String,
    pub artist: ArtistId,
    pub release_year: i32,
    /// One entry per metadata column; `None` marks a missing value.
    pub metadata: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Playlist {
    pub external_id: String,
    pub owner: UserId,
    /// Sorted, duplicate free.
    pub members: Vec<SongId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct User {
    pub external_id: String,
    /// Empty when no users file was supplied.
    pub attributes: Vec<Option<f64>>,
}

/// Labels of one playlist over the whole song collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    pub positives: Vec<SongId>,
    pub n_songs: usize,
}

impl Membership {
    pub fn new(mut positives: Vec<SongId>, n_songs: usize) -> Result<Self> {
        positives.sort_unstable();
        positives.dedup();
        if let Some(last) = positives.last() {
            if last.0 >= n_songs {
                return Err(Error::InvalidArgument(format!(
                    "{last} out of range for {n_songs} songs"
                )));
            }
        }
        Ok(Self { positives, n_songs })
    }

    pub fn n_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn n_negative(&self) -> usize {
        self.n_songs - self.positives.len()
    }

    /// Dense 0/1 label vector.
    pub fn labels(&self) -> Vec<bool> {
        let mut y = vec![false; self.n_songs];
        for s in &self.positives {
            y[s.0] = true;
        }
        y
    }
}

/// Raw song row with external ids, before index assignment.
#[derive(Debug, Clone)]
pub struct SongRecord {
    pub song_id: String,
    pub artist_id: String,
    pub release_year: i32,
    pub metadata: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct PlaylistRecord {
    pub playlist_id: String,
    pub user_id: String,
    pub song_ids: Vec<String>,
    /// Source line for error messages (0 when not from a file).
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct UserRecord {
    pub user_id: String,
    pub attributes: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Corpus {
    metadata_columns: Vec<String>,
    user_attribute_columns: Vec<String>,
    songs: Vec<Song>,
    artists: Vec<String>,
    users: Vec<User>,
    playlists: Vec<Playlist>,
    user_playlists: Vec<Vec<PlaylistId>>,
    has_user_attributes: bool,
}

impl Corpus {
    /// Validates raw records and assigns dense indices.
    pub fn from_records(
        metadata_columns: Vec<String>,
        songs: Vec<SongRecord>,
        playlists: Vec<PlaylistRecord>,
        users: Option<(Vec<String>, Vec<UserRecord>)>,
        playlists_source: &Path,
    ) -> Result<Self> {
        let src = playlists_source;
        let mut song_rows: BTreeMap<String, SongRecord> = BTreeMap::new();
        for rec in songs {
            if rec.metadata.len() != metadata_columns.len() {
                return Err(Error::Data(format!(
                    "song {} has {} metadata values, expected {}",
                    rec.song_id,
                    rec.metadata.len(),
                    metadata_columns.len()
                )));
            }
            if song_rows.contains_key(&rec.song_id) {
                return Err(Error::Data(format!("duplicate song id {}", rec.song_id)));
            }
            song_rows.insert(rec.song_id.clone(), rec);
        }
        if song_rows.is_empty() {
            return Err(Error::Data("corpus has no songs".into()));
        }

        let artists: Vec<String> = song_rows
            .values()
            .map(|r| r.artist_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let artist_index: HashMap<&str, usize> = artists
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let song_index: HashMap<&str, usize> = song_rows
            .keys()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let mut seen_playlists = BTreeSet::new();
        for rec in &playlists {
            if !seen_playlists.insert(rec.playlist_id.as_str()) {
                return Err(Error::parse(
                    src,
                    rec.line,
                    format!("duplicate playlist id {}", rec.playlist_id),
                ));
            }
        }
        let user_names: Vec<String> = playlists
            .iter()
            .map(|r| r.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let user_index: HashMap<&str, usize> = user_names
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();

        let mut sorted_playlists: Vec<&PlaylistRecord> = playlists.iter().collect();
        sorted_playlists.sort_by(|a, b| a.playlist_id.cmp(&b.playlist_id));

        let mut covered = vec![false; song_rows.len()];
        let mut out_playlists = Vec::with_capacity(sorted_playlists.len());
        let mut user_playlists = vec![Vec::new(); user_names.len()];
        for (pid, rec) in sorted_playlists.iter().enumerate() {
            if rec.song_ids.is_empty() {
                return Err(Error::parse(
                    src,
                    rec.line,
                    format!("playlist {} has no songs", rec.playlist_id),
                ));
            }
            let mut members = Vec::with_capacity(rec.song_ids.len());
            for sid in &rec.song_ids {
                let idx = *song_index.get(sid.as_str()).ok_or_else(|| {
                    Error::parse(
                        src,
                        rec.line,
                        format!(
                            "playlist {} references unknown song id {sid}",
                            rec.playlist_id
                        ),
                    )
                })?;
                members.push(SongId(idx));
            }
            members.sort_unstable();
            if let Some(w) = members.windows(2).find(|w| w[0] == w[1]) {
                let name = song_rows.keys().nth(w[0].0).cloned().unwrap_or_default();
                return Err(Error::parse(
                    src,
                    rec.line,
                    format!(
                        "playlist {} lists song {name} more than once",
                        rec.playlist_id
                    ),
                ));
            }
            for m in &members {
                covered[m.0] = true;
            }
            let owner = UserId(user_index[rec.user_id.as_str()]);
            user_playlists[owner.0].push(PlaylistId(pid));
            out_playlists.push(Playlist {
                external_id: rec.playlist_id.clone(),
                owner,
                members,
            });
        }
        if out_playlists.is_empty() {
            return Err(Error::Data("corpus has no playlists".into()));
        }
        if let Some(pos) = covered.iter().position(|c| !c) {
            let name = song_rows.keys().nth(pos).cloned().unwrap_or_default();
            return Err(Error::Data(format!("song {name} appears in no playlist")));
        }

        let (user_attribute_columns, users, has_user_attributes) = match users {
            None => (
                Vec::new(),
                user_names
                    .iter()
                    .map(|u| User {
                        external_id: u.clone(),
                        attributes: Vec::new(),
                    })
                    .collect(),
                false,
            ),
            Some((columns, records)) => {
                let mut by_id: HashMap<String, Vec<Option<f64>>> = HashMap::new();
                for r in records {
                    if r.attributes.len() != columns.len() {
                        return Err(Error::Data(format!(
                            "user {} has {} attributes, expected {}",
                            r.user_id,
                            r.attributes.len(),
                            columns.len()
                        )));
                    }
                    if by_id.insert(r.user_id.clone(), r.attributes).is_some() {
                        return Err(Error::Data(format!("duplicate user id {}", r.user_id)));
                    }
                }
                let mut users = Vec::with_capacity(user_names.len());
                for u in &user_names {
                    let attributes = by_id.remove(u).ok_or_else(|| {
                        Error::Data(format!("user {u} owns playlists but has no attribute row"))
                    })?;
                    users.push(User {
                        external_id: u.clone(),
                        attributes,
                    });
                }
                (columns, users, true)
            }
        };

        let songs = song_rows
            .into_values()
            .map(|r| Song {
                artist: ArtistId(artist_index[r.artist_id.as_str()]),
                external_id: r.song_id,
                release_year: r.release_year,
                metadata: r.metadata,
            })
            .collect();

        Ok(Self {
            metadata_columns,
            user_attribute_columns,
            songs,
            artists,
            users,
            playlists: out_playlists,
            user_playlists,
            has_user_attributes,
        })
    }

    pub fn n_songs(&self) -> usize {
        self.songs.len()
    }

    pub fn n_playlists(&self) -> usize {
        self.playlists.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_artists(&self) -> usize {
        self.artists.len()
    }

    pub fn songs(&self) -> &[Song] {
        &self.songs
    }

    pub fn song(&self, id: SongId) -> &Song {
        &self.songs[id.0]
    }

    pub fn artist_of(&self, id: SongId) -> ArtistId {
        self.songs[id.0].artist
    }

    pub fn artist_name(&self, id: ArtistId) -> &str {
        &self.artists[id.0]
    }

    pub fn artists(&self) -> &[String] {
        &self.artists
    }

    pub fn playlists(&self) -> &[Playlist] {
        &self.playlists
    }

    pub fn playlist(&self, id: PlaylistId) -> &Playlist {
        &self.playlists[id.0]
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn user(&self, id: UserId) -> &User {
        &self.users[id.0]
    }

    /// Playlists owned by a user, ascending.
    pub fn user_playlists(&self, id: UserId) -> &[PlaylistId] {
        &self.user_playlists[id.0]
    }

    pub fn metadata_columns(&self) -> &[String] {
        &self.metadata_columns
    }

    pub fn user_attribute_columns(&self) -> &[String] {
        &self.user_attribute_columns
    }

    pub fn has_user_attributes(&self) -> bool {
        self.has_user_attributes
    }

    pub fn find_song(&self, external_id: &str) -> Option<SongId> {
        self.songs
            .binary_search_by(|s| s.external_id.as_str().cmp(external_id))
            .ok()
            .map(SongId)
    }

    pub fn find_playlist(&self, external_id: &str) -> Option<PlaylistId> {
        self.playlists
            .binary_search_by(|p| p.external_id.as_str().cmp(external_id))
            .ok()
            .map(PlaylistId)
    }

    pub fn find_user(&self, external_id: &str) -> Option<UserId> {
        self.users
            .binary_search_by(|u| u.external_id.as_str().cmp(external_id))
            .ok()
            .map(UserId)
    }

    pub fn membership(&self, id: PlaylistId) -> Result<Membership> {
        let p = self
            .playlists
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("{id} does not exist")))?;
        Ok(Membership {
            positives: p.members.clone(),
            n_songs: self.songs.len(),
        })
    }

    /// Writes the corpus back out in the loadable text formats.
    pub fn write_files(&self, songs: &Path, playlists: &Path, users: Option<&Path>) -> Result<()> {
        let mut out = String::from("song_id,artist_id,release_year");
        for c in &self.metadata_columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for s in &self.songs {
            out.push_str(&format!(
                "{},{},{}",
                s.external_id, self.artists[s.artist.0], s.release_year
            ));
            push_values(&mut out, &s.metadata);
            out.push('\n');
        }
        write_text(songs, &out)?;

        let mut out = String::from("playlist_id,user_id,song_ids\n");
        for p in &self.playlists {
            let members: Vec<&str> = p
                .members
                .iter()
                .map(|m| self.songs[m.0].external_id.as_str())
                .collect();
            out.push_str(&format!(
                "{},{},{}\n",
                p.external_id,
                self.users[p.owner.0].external_id,
                members.join(";")
            ));
        }
        write_text(playlists, &out)?;

        if let Some(path) = users {
            let mut out = String::from("user_id");
            for c in &self.user_attribute_columns {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
            for u in &self.users {
                out.push_str(&u.external_id);
                push_values(&mut out, &u.attributes);
                out.push('\n');
            }
            write_text(path, &out)?;
        }
        Ok(())
    }
}

fn push_values(out: &mut String, values: &[Option<f64>]) {
    for v in values {
        out.push(',');
        match v {
            // `{:?}` prints the shortest representation that round-trips exactly
            Some(x) => out.push_str(&format!("{x:?}")),
            None => out.push('?'),
        }
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank, non-comment lines with their 1-based line numbers.
pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

pub(crate) fn parse_optional_number(path: &Path, line: usize, field: &str) -> Result<Option<f64>> {
    let field = field.trim();
    if field == "?" {
        return Ok(None);
    }
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("expected number or '?', got {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(
            path,
            line,
            format!("non-finite value {field:?}"),
        ));
    }
    Ok(Some(v))
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn read_songs(path: &Path) -> Result<(Vec<String>, Vec<SongRecord>)> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 0, "missing header"))?;
    let header = split_fields(header);
    if header.len() < 3
        || header[0] != "song_id"
        || header[1] != "artist_id"
        || header[2] != "release_year"
    {
        return Err(Error::parse(
            path,
            hline,
            "header must start with song_id,artist_id,release_year",
        ));
    }
    let columns: Vec<String> = header[3..].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (line, row) in lines {
        let fields = split_fields(row);
        if fields.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(path, line, "empty id"));
        }
        if let Some(prev) = seen.insert(fields[0].to_string(), line) {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "duplicate song id {} (first seen on line {prev})",
                    fields[0]
                ),
            ));
        }
        let release_year = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad release year {:?}", fields[2])))?;
        let metadata = fields[3..]
            .iter()
            .map(|f| parse_optional_number(path, line, f))
            .collect::<Result<_>>()?;
        records.push(SongRecord {
            song_id: fields[0].to_string(),
            artist_id: fields[1].to_string(),
            release_year,
            metadata,
        });
    }
    Ok((columns, records))
}

fn read_playlists(path: &Path) -> Result<Vec<PlaylistRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (idx, (line, row)) in data_lines(&text).enumerate() {
        let fields = split_fields(row);
        if idx == 0 && fields.first() == Some(&"playlist_id") {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "expected playlist_id,user_id,songs; found {} fields",
                    fields.len()
                ),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(path, line, "empty id"));
        }
        let song_ids: Vec<String> = fields[2]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        records.push(PlaylistRecord {
            playlist_id: fields[0].to_string(),
            user_id: fields[1].to_string(),
            song_ids,
            line,
        });
    }
    Ok(records)
}

fn read_users(path: &Path) -> Result<(Vec<String>, Vec<UserRecord>)> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 0, "missing header"))?;
    let header = split_fields(header);
    if header[0] != "user_id" {
        return Err(Error::parse(path, hline, "header must start with user_id"));
    }
    let columns = header[1..].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (line, row) in lines {
        let fields = split_fields(row);
        if fields.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        if let Some(prev) = seen.insert(fields[0].to_string(), line) {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "duplicate user id {} (first seen on line {prev})",
                    fields[0]
                ),
            ));
        }
        let attributes = fields[1..]
            .iter()
            .map(|f| parse_optional_number(path, line, f))
            .collect::<Result<_>>()?;
        records.push(UserRecord {
            user_id: fields[0].to_string(),
            attributes,
        });
    }
    Ok((columns, records))
}

/// Loads and validates a corpus from its text files.
pub fn load_corpus(
    songs_path: &Path,
    playlists_path: &Path,
    users_path: Option<&Path>,
) -> Result<Corpus> {
    let (columns, songs) = read_songs(songs_path)?;
    let playlists = read_playlists(playlists_path)?;
    let users = users_path.map(read_users).transpose()?;
    Corpus::from_records(columns, songs, playlists, users, playlists_path).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!(
            "{}: {msg}",
            display_paths(songs_path, playlists_path)
        )),
        other => other,
    })
}

fn display_paths(a: &Path, b: &Path) -> String {
    let a: PathBuf = a.into();
    format!("{} / {}", a.display(), b.display())
}
