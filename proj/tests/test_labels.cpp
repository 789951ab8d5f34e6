#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <vector>

#include "msf/msf.hpp"

using namespace msf;

namespace {

// Quadratic-window reference implementation, shared definition: a non-ignore
// pixel is boundary iff any non-ignore pixel within Chebyshev distance eps
// carries a different class.
BoundaryMap boundary_oracle(const LabelMap& labels, std::int64_t eps, BoundaryMode mode) {
  BoundaryMap out(labels.height, labels.width, 0);
  for (std::int64_t y = 0; y < labels.height; ++y) {
    for (std::int64_t x = 0; x < labels.width; ++x) {
      const std::uint8_t c = labels.at(y, x);
      if (c == kIgnoreIndex) {
        out.at(y, x) = kIgnoreIndex;
        continue;
      }
      bool boundary = false;
      for (std::int64_t ny = 0; ny < labels.height; ++ny) {
        for (std::int64_t nx = 0; nx < labels.width; ++nx) {
          if (std::max(std::abs(ny - y), std::abs(nx - x)) > eps) continue;
          const std::uint8_t nc = labels.at(ny, nx);
          if (nc != kIgnoreIndex && nc != c) boundary = true;
        }
      }
      if (boundary) {
        out.at(y, x) =
            mode == BoundaryMode::ClassBoundary ? static_cast<std::uint8_t>(c + 1) : 1;
      }
    }
  }
  return out;
}

LabelMap random_map(std::int64_t h, std::int64_t w, int num_classes, double ignore_frac,
                    Rng& rng) {
  LabelMap m(h, w, 0);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (auto& id : m.ids) {
    id = coin(rng) < ignore_frac ? kIgnoreIndex : static_cast<std::uint8_t>(cls(rng));
  }
  return m;
}

BoundaryConfig bcfg(std::int64_t eps, BoundaryMode mode) {
  BoundaryConfig c;
  c.epsilon = eps;
  c.mode = mode;
  return c;
}

}  // namespace

TEST_CASE("boundary_labels on a uniform map is all zeros") {
  LabelMap m(8, 8, 3);
  for (std::int64_t eps : {1, 2, 5}) {
    BoundaryMap b = boundary_labels(m, bcfg(eps, BoundaryMode::ClassBoundary));
    for (auto id : b.ids) REQUIRE(id == 0);
  }
}

TEST_CASE("boundary_labels on a two-class vertical split") {
  LabelMap m(4, 4, 0);
  for (std::int64_t y = 0; y < 4; ++y) {
    m.at(y, 0) = 1;
    m.at(y, 1) = 1;
    m.at(y, 2) = 2;
    m.at(y, 3) = 2;
  }
  SECTION("class mode marks the two inner columns with class-offset ids") {
    BoundaryMap b = boundary_labels(m, bcfg(1, BoundaryMode::ClassBoundary));
    for (std::int64_t y = 0; y < 4; ++y) {
      REQUIRE(b.at(y, 0) == 0);
      REQUIRE(b.at(y, 1) == 2);  // class 1, stored as class+1
      REQUIRE(b.at(y, 2) == 3);  // class 2, stored as class+1
      REQUIRE(b.at(y, 3) == 0);
    }
  }
  SECTION("zero-one mode marks the two inner columns with 1") {
    BoundaryMap b = boundary_labels(m, bcfg(1, BoundaryMode::ZeroOneBoundary));
    for (std::int64_t y = 0; y < 4; ++y) {
      REQUIRE(b.at(y, 0) == 0);
      REQUIRE(b.at(y, 1) == 1);
      REQUIRE(b.at(y, 2) == 1);
      REQUIRE(b.at(y, 3) == 0);
    }
  }
}

TEST_CASE("boundary_labels matches the brute-force oracle") {
  Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap m = random_map(32, 32, 4, trial % 3 == 0 ? 0.1 : 0.0, rng);
    for (std::int64_t eps : {1, 2, 5}) {
      for (BoundaryMode mode : {BoundaryMode::ClassBoundary, BoundaryMode::ZeroOneBoundary}) {
        BoundaryMap got = boundary_labels(m, bcfg(eps, mode));
        BoundaryMap want = boundary_oracle(m, eps, mode);
        REQUIRE(got == want);
      }
    }
  }
}

TEST_CASE("adjacent different-class pixels are both boundary") {
  Rng rng(72);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap m = random_map(16, 16, 3, 0.0, rng);
    BoundaryMap b = boundary_labels(m, bcfg(1, BoundaryMode::ZeroOneBoundary));
    for (std::int64_t y = 0; y < 16; ++y) {
      for (std::int64_t x = 0; x + 1 < 16; ++x) {
        if (m.at(y, x) != m.at(y, x + 1)) {
          REQUIRE(b.at(y, x) == 1);
          REQUIRE(b.at(y, x + 1) == 1);
        }
      }
    }
  }
}

TEST_CASE("boundary set grows monotonically with epsilon") {
  Rng rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap m = random_map(24, 24, 4, 0.05, rng);
    for (std::int64_t eps = 1; eps < 5; ++eps) {
      BoundaryMap small = boundary_labels(m, bcfg(eps, BoundaryMode::ZeroOneBoundary));
      BoundaryMap big = boundary_labels(m, bcfg(eps + 1, BoundaryMode::ZeroOneBoundary));
      for (std::size_t i = 0; i < small.ids.size(); ++i) {
        if (small.ids[i] == 1) REQUIRE(big.ids[i] == 1);
      }
    }
  }
}

TEST_CASE("mode consistency: class boundaries nonzero exactly where zero-one is 1") {
  Rng rng(74);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap m = random_map(24, 24, 5, 0.1, rng);
    for (std::int64_t eps : {1, 3}) {
      BoundaryMap cb = boundary_labels(m, bcfg(eps, BoundaryMode::ClassBoundary));
      BoundaryMap zb = boundary_labels(m, bcfg(eps, BoundaryMode::ZeroOneBoundary));
      for (std::size_t i = 0; i < cb.ids.size(); ++i) {
        if (cb.ids[i] == kIgnoreIndex) {
          REQUIRE(zb.ids[i] == kIgnoreIndex);
        } else {
          REQUIRE((zb.ids[i] == 1) == (cb.ids[i] != 0));
        }
      }
    }
  }
}

TEST_CASE("ignore pixels neither emit nor receive boundary status") {
  LabelMap m(3, 3, 1);
  m.at(1, 1) = kIgnoreIndex;
  BoundaryMap b = boundary_labels(m, bcfg(1, BoundaryMode::ClassBoundary));
  REQUIRE(b.at(1, 1) == kIgnoreIndex);
  for (std::int64_t y = 0; y < 3; ++y) {
    for (std::int64_t x = 0; x < 3; ++x) {
      if (y == 1 && x == 1) continue;
      REQUIRE(b.at(y, x) == 0);
    }
  }
}

TEST_CASE("boundary config rejects bad settings") {
  REQUIRE_THROWS_AS(boundary_labels(LabelMap(2, 2, 0), bcfg(0, BoundaryMode::ClassBoundary)),
                    config_error);
  REQUIRE_THROWS_AS(boundary_labels(LabelMap(2, 2, 0), bcfg(1, BoundaryMode::Off)),
                    config_error);
}

TEST_CASE("downsample_labels identity at factor 1") {
  Rng rng(75);
  LabelMap m = random_map(8, 12, 4, 0.1, rng);
  REQUIRE(downsample_labels(m, 1) == m);
}

TEST_CASE("downsample_labels keeps the top-left sample of each cell") {
  LabelMap m(8, 8, 0);
  for (std::int64_t y = 0; y < 8; ++y) {
    for (std::int64_t x = 0; x < 8; ++x) {
      m.at(y, x) = static_cast<std::uint8_t>(((y / 2) + (x / 2)) % 2);
    }
  }
  LabelMap d = downsample_labels(m, 2);
  REQUIRE(d.height == 4);
  REQUIRE(d.width == 4);
  for (std::int64_t y = 0; y < 4; ++y) {
    for (std::int64_t x = 0; x < 4; ++x) {
      REQUIRE(d.at(y, x) == static_cast<std::uint8_t>((y + x) % 2));
    }
  }
}

TEST_CASE("downsample_labels never invents ids") {
  Rng rng(76);
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap m = random_map(16, 24, 6, 0.1, rng);
    for (std::int64_t factor : {2, 4, 8}) {
      LabelMap d = downsample_labels(m, factor);
      REQUIRE(d.height == m.height / factor);
      REQUIRE(d.width == m.width / factor);
      std::set<std::uint8_t> in_ids(m.ids.begin(), m.ids.end());
      for (auto id : d.ids) REQUIRE(in_ids.count(id) == 1);
      // exact positional check against the top-left rule
      for (std::int64_t y = 0; y < d.height; ++y) {
        for (std::int64_t x = 0; x < d.width; ++x) {
          REQUIRE(d.at(y, x) == m.at(y * factor, x * factor));
        }
      }
    }
  }
}

TEST_CASE("downsample_labels requires divisibility") {
  LabelMap m(6, 6, 0);
  REQUIRE_THROWS_AS(downsample_labels(m, 4), shape_error);
  REQUIRE_THROWS_AS(downsample_labels(m, 0), config_error);
}

TEST_CASE("validate_labels reports range violations and histograms") {
  LabelMap ok(4, 4, 2);
  LabelReport r_ok = validate_labels(ok, 3);
  REQUIRE(r_ok.out_of_range.empty());
  REQUIRE(r_ok.class_counts[2] == 16);
  REQUIRE(r_ok.ignore_fraction == 0.0);

  LabelMap bad(4, 4, 0);
  bad.at(0, 0) = 3;
  bad.at(1, 1) = kIgnoreIndex;
  LabelReport r = validate_labels(bad, 3);
  REQUIRE(r.out_of_range.size() == 1);
  REQUIRE(r.out_of_range[0].first == 3);
  REQUIRE(r.out_of_range[0].second == 1);
  REQUIRE_THAT(r.ignore_fraction, Catch::Matchers::WithinAbs(1.0 / 16.0, 1e-12));

  Rng rng(77);
  LabelMap m = random_map(32, 32, 5, 0.2, rng);
  LabelReport rep = validate_labels(m, 5);
  std::vector<std::int64_t> hist(5, 0);
  std::int64_t ignored = 0;
  for (auto id : m.ids) {
    if (id == kIgnoreIndex) {
      ++ignored;
    } else {
      ++hist[id];
    }
  }
  for (int k = 0; k < 5; ++k) REQUIRE(rep.class_counts[k] == hist[k]);
  REQUIRE_THAT(rep.ignore_fraction,
               Catch::Matchers::WithinAbs(static_cast<double>(ignored) / 1024.0, 1e-12));
}

TEST_CASE("flip_horizontal is an involution that mirrors columns") {
  Rng rng(78);
  LabelMap m = random_map(8, 10, 4, 0.1, rng);
  LabelMap f = flip_horizontal(m);
  REQUIRE(f.height == m.height);
  REQUIRE(f.width == m.width);
  for (std::int64_t y = 0; y < m.height; ++y) {
    for (std::int64_t x = 0; x < m.width; ++x) {
      REQUIRE(f.at(y, x) == m.at(y, m.width - 1 - x));
    }
  }
  REQUIRE(flip_horizontal(f) == m);
}

TEST_CASE("recommended boundary setup composes with downsampling") {
  // eighth-scale supervision: downsample first, then extract boundaries
  Rng rng(79);
  LabelMap full = random_map(32, 32, 3, 0.0, rng);
  LabelMap small = downsample_labels(full, 8);
  BoundaryMap b = boundary_labels(small, bcfg(1, BoundaryMode::ClassBoundary));
  REQUIRE(b.height == 4);
  REQUIRE(b.width == 4);
  for (auto id : b.ids) {
    REQUIRE((id == 0 || id == kIgnoreIndex || (id >= 1 && id <= 3)));
  }
}
