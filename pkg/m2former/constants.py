from pathlib import Path

DEFAULT_LOGGING_CONFIG_PATH = Path(__file__).parent.parent / 'logging.yml'
# Reserved token id. CTC blank in the encoder head, <sos>/<eos> in the decoder.
BLANK_ID = 0
SOS_ID = 0
EOS_ID = 0
SAMPLE_RATE = 8000
FRAME_MS = 25.0
SHIFT_MS = 10.0
FFT_SIZE = 256
SPEED_OF_SOUND = 343.0
# Dataset file naming
MANIFEST_FILENAME = 'manifest.json'
WAVEFORM_FMT = 'utt{utt_id}_ch{channel}.f64'
# Output file names written by the experiment commands
LOSS_CSV = 'loss.csv'
REPORT_JSON = 'report.json'
ABLATION_CSV = 'ablation.csv'
CHECKPOINT_FILENAME = 'model.ckpt'
CONFIG_FILENAME = 'experiment.cfg'
# Checkpoint file layout
CHECKPOINT_MAGIC = b'M2FCKPT\x00'
CHECKPOINT_VERSION = 1
# Frames required by the CNNDD stride schedule
MIN_CNNDD_FRAMES = 4
# Factorial permutation search limit
MAX_PIT_SPEAKERS = 4
