from .musdb import (
    STEMS,
    TRACK_NAMES,
    DatasetError,
    DatasetSplit,
    MissingStemError,
    SongFolder,
    load_dataset,
    load_musdb_layout,
    sample_training_chunk,
)
from .synth import SynthSpec, synthesize_corpus, synthesize_song
from .wav import BitDepthError, MalformedWavError, NotPcmError, StereoTrack, WavError, read_wav, write_wav
