#pragma once

#include "lsp/common.hpp"
#include "lsp/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

// Command-line orchestration: sectioned key=value configs with a fixed
// schema, per-run manifests with artifact digests, PGM image grids, and the
// nine pipeline subcommands (train-vae, train-inference, train-robust,
// fit-stats, train-attack, evaluate, baseline-pgd, ablate, report).
namespace lsp::cli {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------- config ---

// Parsed INI-style text: [section] headers, key = value lines, full-line
// comments starting with '#' or ';'. Section and key names are kebab-case.
// Duplicate keys inside a section are rejected (fail-fast over last-wins).
struct ConfigData {
    std::map<std::string, std::map<std::string, std::string>> sections;
};

ConfigData parse_config_text(const std::string& text);
ConfigData load_config_file(const std::string& path);

// Known keys and their defaults for every subcommand section. Defaults are
// rendered from the module config structs, so there is one source of truth.
const std::map<std::string, std::map<std::string, std::string>>& config_schema();

// Final key -> value map for one section: schema defaults, overlaid by the
// config file, overlaid by --override entries. An override key may be bare
// (applies to `section`) or dotted "other-section.key". Any section or key
// absent from the schema is a ConfigError.
std::map<std::string, std::string> resolve_section(
    const ConfigData& file, const std::string& section,
    const std::vector<std::string>& overrides);

// Typed access with ConfigError on malformed values.
int64_t cfg_int(const std::map<std::string, std::string>& cfg, const std::string& key);
double cfg_double(const std::map<std::string, std::string>& cfg, const std::string& key);
bool cfg_bool(const std::map<std::string, std::string>& cfg, const std::string& key);
const std::string& cfg_str(const std::map<std::string, std::string>& cfg, const std::string& key);

// -------------------------------------------------------------- manifest ---

struct ArtifactRef {
    std::string path;    // relative to the run directory for outputs
    std::string crc32;   // 8 hex digits of the file bytes
};

// One per run directory (manifest.json). Every artifact the run emitted is
// listed with a digest; inputs record the checkpoint/stats files consumed.
struct RunManifest {
    std::string subcommand;
    std::string version = kVersion;
    uint64_t seed = 0;
    std::string data_root;
    std::string out_dir;
    std::map<std::string, std::string> config;  // fully resolved section
    std::vector<ArtifactRef> inputs;            // absolute or caller-given paths
    std::vector<ArtifactRef> outputs;           // relative to out_dir
    double wall_seconds = 0;
};

std::string file_crc32(const std::string& path);  // 8 lowercase hex digits
void write_manifest(const RunManifest& m, const std::string& out_dir);
RunManifest read_manifest(const std::string& out_dir);

// Recomputes every output digest; raises CorruptFile on any mismatch.
void verify_manifest_digests(const RunManifest& m);

// ------------------------------------------------------------ image grid ---

// Tiles [N,H,W] (or [N,H*W] square) images into one binary PGM (P5, maxval
// 255, byte = round(pixel * 255)) with 1-pixel mid-gray separators. With
// columns = 0 all images sit in a single row; otherwise the grid wraps after
// `columns` tiles and pads the last row with black. A sidecar .txt pairs each
// tile index with its caption (one "index<TAB>caption" line per tile).
void emit_grid(const Tensor<float>& images, const std::vector<std::string>& captions,
               const std::string& path, int64_t columns = 0);

// Reads back a P5 file written by emit_grid (maxval must be 255).
struct PgmImage {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> bytes;  // row-major, width * height
};
PgmImage read_pgm(const std::string& path);

// ----------------------------------------------------------- subcommands ---

// Everything a subcommand needs from the command line.
struct Invocation {
    std::string subcommand;
    std::string config_path;  // empty = defaults only
    uint64_t seed = 0;
    std::string data_root;
    std::string out_dir;
    std::vector<std::string> overrides;  // raw "key=value" strings
};

// Runs one subcommand end to end; returns the process exit status. On
// failure an error.json {code, message} lands in the run directory (when one
// is known) and a one-line JSON record goes to stderr.
int run(const Invocation& inv);

// argv entry point (argv[0] is the program name).
int run_main(const std::vector<std::string>& args);
int run_main(int argc, const char* const* argv);

}  // namespace lsp::cli
