#include "bsr/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "bsr/errors.hpp"
#include "bsr/rng.hpp"

namespace bsr::dataio {

namespace {

constexpr uint32_t kImageMagic = 0x00000803u;
constexpr uint32_t kLabelMagic = 0x00000801u;

uint32_t read_u32_be(std::istream & in, const std::string & path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char *>(b), 4);
    if (!in) {
        throw FormatError("truncated IDX header in " + path);
    }
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_u32_be(std::ostream & out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char *>(b), 4);
}

std::vector<unsigned char> read_bytes(std::istream & in, size_t n, const std::string & path) {
    std::vector<unsigned char> buf(n);
    in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) {
        throw FormatError("truncated IDX payload in " + path);
    }
    return buf;
}

} // namespace

Dataset load_mnist_idx(const std::string & images_path, const std::string & labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) {
        throw IoError("cannot open " + images_path);
    }
    if (const uint32_t magic = read_u32_be(img, images_path); magic != kImageMagic) {
        throw FormatError("bad image magic in " + images_path);
    }
    const uint32_t n = read_u32_be(img, images_path);
    const uint32_t rows = read_u32_be(img, images_path);
    const uint32_t cols = read_u32_be(img, images_path);
    const size_t d = size_t(rows) * size_t(cols);
    const std::vector<unsigned char> pixels = read_bytes(img, size_t(n) * d, images_path);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) {
        throw IoError("cannot open " + labels_path);
    }
    if (const uint32_t magic = read_u32_be(lab, labels_path); magic != kLabelMagic) {
        throw FormatError("bad label magic in " + labels_path);
    }
    const uint32_t nl = read_u32_be(lab, labels_path);
    if (nl != n) {
        throw FormatError("image/label count mismatch between " + images_path + " and " + labels_path);
    }
    const std::vector<unsigned char> labels = read_bytes(lab, nl, labels_path);

    Dataset ds;
    ds.features = Matrix(int64_t(n), int64_t(d));
    for (size_t i = 0; i < pixels.size(); ++i) {
        ds.features.data[i] = double(pixels[i]) / 255.0;
    }
    ds.labels.resize(n);
    int max_label = 0;
    for (uint32_t i = 0; i < n; ++i) {
        ds.labels[i] = int(labels[i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.classes = std::max(10, max_label + 1);
    return ds;
}

void write_mnist_idx(const Dataset & ds, const std::string & images_path,
                     const std::string & labels_path, int64_t rows, int64_t cols) {
    if (rows * cols != ds.dim()) {
        throw InvalidInput("write_mnist_idx: rows*cols must equal feature dimension");
    }
    std::ofstream img(images_path, std::ios::binary);
    if (!img) {
        throw IoError("cannot open " + images_path + " for writing");
    }
    write_u32_be(img, kImageMagic);
    write_u32_be(img, uint32_t(ds.size()));
    write_u32_be(img, uint32_t(rows));
    write_u32_be(img, uint32_t(cols));
    std::vector<unsigned char> pixels(ds.features.data.size());
    for (size_t i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(ds.features.data[i], 0.0, 1.0);
        pixels[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    img.write(reinterpret_cast<const char *>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) {
        throw IoError("cannot open " + labels_path + " for writing");
    }
    write_u32_be(lab, kLabelMagic);
    write_u32_be(lab, uint32_t(ds.size()));
    std::vector<unsigned char> labels(ds.labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<unsigned char>(ds.labels[i]);
    }
    lab.write(reinterpret_cast<const char *>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
}

Dataset synth_blobs(int classes, int per_class, int d, uint64_t seed) {
    if (classes < 2) {
        throw InvalidInput("synth_blobs: classes must be >= 2");
    }
    if (d < 2) {
        throw InvalidInput("synth_blobs: dimension must be >= 2");
    }
    if (per_class < 1) {
        throw InvalidInput("synth_blobs: per_class must be >= 1");
    }
    const int64_t n = int64_t(classes) * per_class;
    Dataset ds;
    ds.features = Matrix(n, d);
    ds.labels.resize(size_t(n));
    ds.classes = classes;

    // Class means on scaled axis-aligned corners so clusters stay separated;
    // sigma 0.06 keeps a 6-sigma gap at the default spacing.
    Rng rng(seed);
    const double sigma = 0.06;
    int64_t row = 0;
    for (int c = 0; c < classes; ++c) {
        std::vector<double> mean(size_t(d), 0.0);
        for (int j = 0; j < d; ++j) {
            mean[size_t(j)] = (((c >> (j % 8)) & 1) != 0) ? 0.8 : 0.2;
        }
        mean[size_t(c % d)] = 0.5 + 0.4 * ((c / d) % 2 == 0 ? 1.0 : -1.0);
        for (int k = 0; k < per_class; ++k, ++row) {
            for (int j = 0; j < d; ++j) {
                const double v = mean[size_t(j)] + sigma * rng.normal();
                ds.features(row, j) = std::clamp(v, 0.0, 1.0);
            }
            ds.labels[size_t(row)] = c;
        }
    }
    return ds;
}

namespace {

// 7×5 pixel masks for digit glyphs 0..9, row strings top to bottom.
const char * const kGlyphs[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00110", "01000", "10000", "11111"},
    {"01110", "10001", "00001", "00110", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
};

} // namespace

Dataset synth_digits(int per_class, uint64_t seed) {
    if (per_class < 1) {
        throw InvalidInput("synth_digits: per_class must be >= 1");
    }
    constexpr int kSide = 28;
    constexpr int kScale = 3;
    constexpr int kGlyphH = 7 * kScale;
    constexpr int kGlyphW = 5 * kScale;
    const int64_t n = 10 * int64_t(per_class);

    Dataset ds;
    ds.features = Matrix(n, kSide * kSide);
    ds.labels.resize(size_t(n));
    ds.classes = 10;

    // Degradations sized so a small MLP lands in the high-90s like it would
    // on real handwriting: wide placement jitter, low and variable contrast,
    // stroke-cell dropout and heavy pixel noise.
    constexpr int kJitter = 4;       // +- placement range
    constexpr double kDropout = 0.08; // chance a stroke cell goes missing
    constexpr double kNoise = 0.22;  // additive Gaussian sigma per pixel

    Rng rng(seed);
    int64_t row = 0;
    for (int digit = 0; digit < 10; ++digit) {
        for (int k = 0; k < per_class; ++k, ++row) {
            const int base_r =
                (kSide - kGlyphH) / 2 + int(rng.below(2 * kJitter + 1)) - kJitter;
            const int base_c =
                (kSide - kGlyphW) / 2 + int(rng.below(2 * kJitter + 1)) - kJitter;
            const double intensity = 0.5 + 0.5 * rng.uniform();
            double * px = ds.features.row(row);
            for (int gr = 0; gr < 7; ++gr) {
                for (int gc = 0; gc < 5; ++gc) {
                    if (kGlyphs[digit][gr][gc] != '1') continue;
                    if (rng.uniform() < kDropout) continue;
                    for (int dr = 0; dr < kScale; ++dr) {
                        for (int dc = 0; dc < kScale; ++dc) {
                            const int r = base_r + gr * kScale + dr;
                            const int c = base_c + gc * kScale + dc;
                            if (r >= 0 && r < kSide && c >= 0 && c < kSide) {
                                px[r * kSide + c] = intensity;
                            }
                        }
                    }
                }
            }
            for (int j = 0; j < kSide * kSide; ++j) {
                px[j] = std::clamp(px[j] + kNoise * rng.normal(), 0.0, 1.0);
            }
            ds.labels[size_t(row)] = digit;
        }
    }
    return ds;
}

Dataset split(const Dataset & ds, const std::array<double, 3> & fractions, uint64_t seed) {
    double sum = 0.0;
    for (const double f : fractions) {
        if (f <= 0.0) {
            throw InvalidInput("split: fractions must be positive");
        }
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InvalidInput("split: fractions must sum to 1");
    }

    std::vector<std::vector<int64_t>> by_class(size_t(ds.classes));
    for (int64_t i = 0; i < ds.size(); ++i) {
        by_class[size_t(ds.labels[size_t(i)])].push_back(i);
    }
    for (int c = 0; c < ds.classes; ++c) {
        if (by_class[size_t(c)].size() < 3) {
            throw InvalidInput("split: class " + std::to_string(c) +
                               " has fewer examples than splits");
        }
    }

    Dataset out = ds;
    out.train.clear();
    out.val.clear();
    out.test.clear();
    Rng rng(seed);
    for (int c = 0; c < ds.classes; ++c) {
        std::vector<int64_t> & idx = by_class[size_t(c)];
        rng.shuffle(idx);
        const int64_t nc = int64_t(idx.size());
        int64_t n_train = int64_t(std::floor(fractions[0] * double(nc)));
        int64_t n_val = int64_t(std::floor(fractions[1] * double(nc)));
        n_train = std::max<int64_t>(1, n_train);
        n_val = std::max<int64_t>(1, n_val);
        if (n_train + n_val >= nc) {
            n_val = std::max<int64_t>(1, nc - n_train - 1);
            n_train = nc - n_val - 1;
        }
        for (int64_t i = 0; i < nc; ++i) {
            if (i < n_train) {
                out.train.push_back(idx[size_t(i)]);
            } else if (i < n_train + n_val) {
                out.val.push_back(idx[size_t(i)]);
            } else {
                out.test.push_back(idx[size_t(i)]);
            }
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

Subset gather(const Dataset & ds, const std::vector<int64_t> & idx) {
    Subset s;
    s.features = Matrix(int64_t(idx.size()), ds.dim());
    s.labels.resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        const int64_t src = idx[i];
        if (src < 0 || src >= ds.size()) {
            throw InvalidInput("gather: index out of range");
        }
        std::memcpy(s.features.row(int64_t(i)), ds.features.row(src),
                    size_t(ds.dim()) * sizeof(double));
        s.labels[i] = ds.labels[size_t(src)];
    }
    return s;
}

uint64_t fingerprint(const Dataset & ds) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    mix(uint64_t(ds.size()));
    mix(uint64_t(ds.dim()));
    mix(uint64_t(ds.classes));
    for (const double v : ds.features.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        mix(bits);
    }
    for (const int l : ds.labels) mix(uint64_t(uint32_t(l)));
    for (const int64_t i : ds.train) mix(uint64_t(i));
    for (const int64_t i : ds.val) mix(uint64_t(i));
    for (const int64_t i : ds.test) mix(uint64_t(i));
    return h;
}

} // namespace bsr::dataio
