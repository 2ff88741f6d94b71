#include "rino/error.hpp"
#include "rino/mesh.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

namespace rino {
namespace {

// Splits text into lines of whitespace-separated tokens, keeping 1-based
// line numbers for error messages. '#' starts a comment.
struct TokenLine {
  int line_no;
  std::vector<std::string_view> tokens;
};

std::vector<TokenLine> tokenize(std::string_view text) {
  std::vector<TokenLine> out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(pos, end - pos);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    TokenLine tl{line_no, {}};
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      if (j > i) tl.tokens.push_back(line.substr(i, j - i));
      i = j;
    }
    if (!tl.tokens.empty()) out.push_back(std::move(tl));
    pos = end + 1;
  }
  return out;
}

[[noreturn]] void fail_line(std::string_view fmt, int line_no, const std::string& what) {
  throw ParseError(std::string(fmt) + " parse error at line " + std::to_string(line_no) + ": " + what);
}

template <typename T>
T parse_number(std::string_view tok, std::string_view fmt, int line_no) {
  T value{};
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    fail_line(fmt, line_no, "invalid number '" + std::string(tok) + "'");
  }
  return value;
}

void append_double(std::string& out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

Mesh build_checked(Points v, Triangles t, std::string_view fmt) {
  try {
    return Mesh(std::move(v), std::move(t));
  } catch (const DataError& e) {
    throw ParseError(std::string(fmt) + " parse error: " + e.what());
  }
}

// ---------------------------------------------------------------- OFF

Mesh parse_off(std::string_view text) {
  constexpr std::string_view kFmt = "OFF";
  auto lines = tokenize(text);
  if (lines.empty() || lines[0].tokens[0] != "OFF") {
    fail_line(kFmt, lines.empty() ? 1 : lines[0].line_no, "missing OFF header");
  }
  // Counts may follow the keyword on the same line.
  std::vector<std::pair<std::string_view, int>> stream;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    for (std::size_t ti = (li == 0 ? 1 : 0); ti < lines[li].tokens.size(); ++ti) {
      stream.emplace_back(lines[li].tokens[ti], lines[li].line_no);
    }
  }
  std::size_t cur = 0;
  auto next = [&](std::string_view what) -> std::pair<std::string_view, int> {
    if (cur >= stream.size()) {
      fail_line(kFmt, lines.back().line_no, "unexpected end of file while reading " + std::string(what));
    }
    return stream[cur++];
  };
  auto [nv_tok, nv_line] = next("vertex count");
  const long nv = parse_number<long>(nv_tok, kFmt, nv_line);
  auto [nf_tok, nf_line] = next("face count");
  const long nf = parse_number<long>(nf_tok, kFmt, nf_line);
  auto [ne_tok, ne_line] = next("edge count");
  (void)parse_number<long>(ne_tok, kFmt, ne_line);
  if (nv < 0 || nf < 0) fail_line(kFmt, nv_line, "negative element count");

  Points v(nv, 3);
  for (long i = 0; i < nv; ++i) {
    for (int c = 0; c < 3; ++c) {
      auto [tok, ln] = next("vertex coordinates");
      v(i, c) = parse_number<double>(tok, kFmt, ln);
    }
  }
  Triangles t(nf, 3);
  for (long f = 0; f < nf; ++f) {
    auto [deg_tok, ln] = next("face");
    const long deg = parse_number<long>(deg_tok, kFmt, ln);
    if (deg != 3) fail_line(kFmt, ln, "unsupported element: face with " + std::to_string(deg) + " vertices");
    for (int c = 0; c < 3; ++c) {
      auto [tok, ln2] = next("face index");
      const long idx = parse_number<long>(tok, kFmt, ln2);
      if (idx < 0 || idx >= nv) fail_line(kFmt, ln2, "vertex index " + std::to_string(idx) + " out of range");
      t(f, c) = static_cast<int>(idx);
    }
    // Trailing per-face colour values on the same line are permitted.
    while (cur < stream.size() && stream[cur].second == ln) ++cur;
  }
  if (cur != stream.size()) fail_line(kFmt, stream[cur].second, "trailing data after last face");
  return build_checked(std::move(v), std::move(t), kFmt);
}

// ---------------------------------------------------------------- OBJ

Mesh parse_obj(std::string_view text) {
  constexpr std::string_view kFmt = "OBJ";
  std::vector<std::array<double, 3>> verts;
  std::vector<std::array<long, 3>> faces;
  std::vector<int> face_lines;
  for (const auto& line : tokenize(text)) {
    const auto& tk = line.tokens;
    if (tk[0] == "v") {
      if (tk.size() < 4 || tk.size() > 5) fail_line(kFmt, line.line_no, "vertex record needs 3 coordinates");
      verts.push_back({parse_number<double>(tk[1], kFmt, line.line_no),
                       parse_number<double>(tk[2], kFmt, line.line_no),
                       parse_number<double>(tk[3], kFmt, line.line_no)});
    } else if (tk[0] == "f") {
      if (tk.size() != 4) {
        fail_line(kFmt, line.line_no,
                  "unsupported element: face with " + std::to_string(tk.size() - 1) + " vertices");
      }
      std::array<long, 3> f{};
      for (int c = 0; c < 3; ++c) {
        std::string_view tok = tk[c + 1];
        tok = tok.substr(0, tok.find('/'));
        long idx = parse_number<long>(tok, kFmt, line.line_no);
        if (idx == 0) fail_line(kFmt, line.line_no, "face index 0 is invalid (OBJ indices are 1-based)");
        // Negative indices are relative to the vertices read so far.
        idx = idx > 0 ? idx - 1 : static_cast<long>(verts.size()) + idx;
        f[c] = idx;
      }
      faces.push_back(f);
      face_lines.push_back(line.line_no);
    } else if (tk[0] == "vn" || tk[0] == "vt" || tk[0] == "vp" || tk[0] == "o" || tk[0] == "g" ||
               tk[0] == "s" || tk[0] == "usemtl" || tk[0] == "mtllib") {
      continue;
    } else {
      fail_line(kFmt, line.line_no, "unsupported element '" + std::string(tk[0]) + "'");
    }
  }
  Points v(static_cast<long>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) v.row(static_cast<long>(i)) << verts[i][0], verts[i][1], verts[i][2];
  Triangles t(static_cast<long>(faces.size()), 3);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    for (int c = 0; c < 3; ++c) {
      if (faces[f][c] < 0 || faces[f][c] >= static_cast<long>(verts.size())) {
        fail_line(kFmt, face_lines[f], "vertex index out of range");
      }
      t(static_cast<long>(f), c) = static_cast<int>(faces[f][c]);
    }
  }
  return build_checked(std::move(v), std::move(t), kFmt);
}

// ---------------------------------------------------------------- PLY

enum class PlyType { kInt8, kUint8, kInt16, kUint16, kInt32, kUint32, kFloat32, kFloat64 };

std::optional<PlyType> ply_type(std::string_view name) {
  if (name == "char" || name == "int8") return PlyType::kInt8;
  if (name == "uchar" || name == "uint8") return PlyType::kUint8;
  if (name == "short" || name == "int16") return PlyType::kInt16;
  if (name == "ushort" || name == "uint16") return PlyType::kUint16;
  if (name == "int" || name == "int32") return PlyType::kInt32;
  if (name == "uint" || name == "uint32") return PlyType::kUint32;
  if (name == "float" || name == "float32") return PlyType::kFloat32;
  if (name == "double" || name == "float64") return PlyType::kFloat64;
  return std::nullopt;
}

std::size_t ply_size(PlyType t) {
  switch (t) {
    case PlyType::kInt8:
    case PlyType::kUint8: return 1;
    case PlyType::kInt16:
    case PlyType::kUint16: return 2;
    case PlyType::kInt32:
    case PlyType::kUint32:
    case PlyType::kFloat32: return 4;
    case PlyType::kFloat64: return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type{};
  bool is_list = false;
  PlyType count_type{};
};

struct PlyElement {
  std::string name;
  long count = 0;
  std::vector<PlyProperty> props;
};

// Little-endian reader over the binary body; every read is bounds-checked.
class BinaryCursor {
 public:
  BinaryCursor(std::string_view data, std::size_t offset) : data_(data), pos_(offset) {}

  double read(PlyType t) {
    const std::size_t n = ply_size(t);
    if (pos_ + n > data_.size()) {
      throw ParseError("PLY parse error at byte offset " + std::to_string(pos_) + ": unexpected end of data");
    }
    unsigned char b[8];
    std::memcpy(b, data_.data() + pos_, n);
    pos_ += n;
    auto le = [&](int bytes) {
      std::uint64_t u = 0;
      for (int i = bytes - 1; i >= 0; --i) u = (u << 8) | b[i];
      return u;
    };
    switch (t) {
      case PlyType::kInt8: return static_cast<std::int8_t>(b[0]);
      case PlyType::kUint8: return b[0];
      case PlyType::kInt16: return static_cast<std::int16_t>(le(2));
      case PlyType::kUint16: return static_cast<std::uint16_t>(le(2));
      case PlyType::kInt32: return static_cast<std::int32_t>(le(4));
      case PlyType::kUint32: return static_cast<std::uint32_t>(le(4));
      case PlyType::kFloat32: {
        const auto u = static_cast<std::uint32_t>(le(4));
        float f;
        std::memcpy(&f, &u, 4);
        return f;
      }
      case PlyType::kFloat64: {
        const std::uint64_t u = le(8);
        double d;
        std::memcpy(&d, &u, 8);
        return d;
      }
    }
    return 0.0;
  }
  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_;
};

Mesh parse_ply(std::string_view bytes) {
  constexpr std::string_view kFmt = "PLY";
  const std::size_t header_end = bytes.find("end_header");
  if (bytes.substr(0, 3) != "ply" || header_end == std::string_view::npos) {
    throw ParseError("PLY parse error at byte offset 0: missing ply magic or end_header");
  }
  std::size_t body = bytes.find('\n', header_end);
  if (body == std::string_view::npos) throw ParseError("PLY parse error: header not newline-terminated");
  ++body;

  auto header = tokenize(bytes.substr(0, header_end));
  bool binary = false;
  std::vector<PlyElement> elements;
  for (std::size_t li = 1; li < header.size(); ++li) {
    const auto& tk = header[li].tokens;
    const int ln = header[li].line_no;
    if (tk[0] == "format") {
      if (tk.size() < 2) fail_line(kFmt, ln, "bad format line");
      if (tk[1] == "ascii") binary = false;
      else if (tk[1] == "binary_little_endian") binary = true;
      else fail_line(kFmt, ln, "unsupported encoding '" + std::string(tk[1]) + "'");
    } else if (tk[0] == "comment" || tk[0] == "obj_info") {
      continue;
    } else if (tk[0] == "element") {
      if (tk.size() != 3) fail_line(kFmt, ln, "bad element line");
      elements.push_back({std::string(tk[1]), parse_number<long>(tk[2], kFmt, ln), {}});
    } else if (tk[0] == "property") {
      if (elements.empty()) fail_line(kFmt, ln, "property before element");
      PlyProperty p;
      if (tk.size() == 5 && tk[1] == "list") {
        auto ct = ply_type(tk[2]);
        auto it = ply_type(tk[3]);
        if (!ct || !it) fail_line(kFmt, ln, "unknown list property type");
        p = {std::string(tk[4]), *it, true, *ct};
      } else if (tk.size() == 3) {
        auto t = ply_type(tk[1]);
        if (!t) fail_line(kFmt, ln, "unknown property type '" + std::string(tk[1]) + "'");
        p = {std::string(tk[2]), *t, false, {}};
      } else {
        fail_line(kFmt, ln, "bad property line");
      }
      elements.back().props.push_back(p);
    } else {
      fail_line(kFmt, ln, "unsupported header keyword '" + std::string(tk[0]) + "'");
    }
  }

  long nv = -1, nf = -1;
  for (const auto& e : elements) {
    if (e.name == "vertex") nv = e.count;
    if (e.name == "face") nf = e.count;
  }
  if (nv < 0) throw ParseError("PLY parse error: no vertex element");
  if (nf < 0) nf = 0;
  Points v(nv, 3);
  Triangles t(nf, 3);

  // Locates the property roles once per element.
  auto prop_index = [](const PlyElement& e, std::initializer_list<std::string_view> names) {
    for (std::size_t i = 0; i < e.props.size(); ++i) {
      for (auto n : names) {
        if (e.props[i].name == n) return static_cast<int>(i);
      }
    }
    return -1;
  };

  std::vector<std::pair<std::string_view, int>> ascii_stream;
  std::size_t ascii_cur = 0;
  if (!binary) {
    const int body_line = static_cast<int>(std::count(bytes.begin(), bytes.begin() + static_cast<long>(body), '\n'));
    for (const auto& line : tokenize(bytes.substr(body))) {
      for (auto tok : line.tokens) ascii_stream.emplace_back(tok, line.line_no + body_line);
    }
  }
  BinaryCursor cursor(bytes, body);
  auto read_value = [&](PlyType type) -> double {
    if (binary) return cursor.read(type);
    if (ascii_cur >= ascii_stream.size()) throw ParseError("PLY parse error: unexpected end of ASCII body");
    auto [tok, ln] = ascii_stream[ascii_cur++];
    return parse_number<double>(tok, kFmt, ln);
  };
  auto location = [&]() {
    if (binary) return "byte offset " + std::to_string(cursor.pos());
    const int ln = ascii_cur < ascii_stream.size() ? ascii_stream[ascii_cur].second : -1;
    return "line " + std::to_string(ln);
  };

  for (const auto& e : elements) {
    const int ix = prop_index(e, {"x"}), iy = prop_index(e, {"y"}), iz = prop_index(e, {"z"});
    const int iface = prop_index(e, {"vertex_indices", "vertex_index"});
    if (e.name == "vertex" && (ix < 0 || iy < 0 || iz < 0)) {
      throw ParseError("PLY parse error: vertex element lacks x/y/z");
    }
    if (e.name == "face" && (iface < 0 || !e.props[iface].is_list)) {
      throw ParseError("PLY parse error: face element lacks vertex_indices list");
    }
    for (long r = 0; r < e.count; ++r) {
      for (std::size_t p = 0; p < e.props.size(); ++p) {
        const auto& prop = e.props[p];
        if (prop.is_list) {
          const std::string where = location();
          const double cnt = read_value(prop.count_type);
          if (cnt < 0) throw ParseError("PLY parse error at " + where + ": negative list length");
          const auto n = static_cast<long>(cnt);
          if (e.name == "face" && static_cast<int>(p) == iface && n != 3) {
            throw ParseError("PLY parse error at " + where + ": unsupported element: face with " +
                             std::to_string(n) + " vertices");
          }
          for (long k = 0; k < n; ++k) {
            const std::string at = location();
            const double val = read_value(prop.type);
            if (e.name == "face" && static_cast<int>(p) == iface) {
              if (val < 0 || val >= static_cast<double>(nv) || val != std::floor(val)) {
                throw ParseError("PLY parse error at " + at + ": vertex index out of range");
              }
              t(r, k) = static_cast<int>(val);
            }
          }
        } else {
          const double val = read_value(prop.type);
          if (e.name == "vertex") {
            if (static_cast<int>(p) == ix) v(r, 0) = val;
            if (static_cast<int>(p) == iy) v(r, 1) = val;
            if (static_cast<int>(p) == iz) v(r, 2) = val;
          }
        }
      }
    }
  }
  if (binary && !cursor.at_end()) {
    throw ParseError("PLY parse error at byte offset " + std::to_string(cursor.pos()) + ": trailing data");
  }
  if (!binary && ascii_cur != ascii_stream.size()) {
    throw ParseError("PLY parse error at line " + std::to_string(ascii_stream[ascii_cur].second) +
                     ": trailing data");
  }
  return build_checked(std::move(v), std::move(t), kFmt);
}

void put_le(std::string& out, const void* src, std::size_t n) {
  // Host is assumed little-endian (checked at configure time).
  out.append(static_cast<const char*>(src), n);
}

std::string ply_body(const Mesh& mesh, const std::vector<std::array<std::uint8_t, 3>>* colors,
                     PlyEncoding enc) {
  const auto& v = mesh.vertices();
  const auto& t = mesh.triangles();
  std::string out = "ply\nformat ";
  out += enc == PlyEncoding::kAscii ? "ascii" : "binary_little_endian";
  out += " 1.0\nelement vertex " + std::to_string(v.rows()) +
         "\nproperty double x\nproperty double y\nproperty double z\n";
  if (colors) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out += "element face " + std::to_string(t.rows()) + "\nproperty list uchar int vertex_indices\nend_header\n";
  for (long i = 0; i < v.rows(); ++i) {
    if (enc == PlyEncoding::kAscii) {
      for (int c = 0; c < 3; ++c) {
        if (c) out += ' ';
        append_double(out, v(i, c));
      }
      if (colors) {
        for (int c = 0; c < 3; ++c) out += ' ' + std::to_string((*colors)[static_cast<std::size_t>(i)][c]);
      }
      out += '\n';
    } else {
      for (int c = 0; c < 3; ++c) {
        const double d = v(i, c);
        put_le(out, &d, 8);
      }
      if (colors) put_le(out, (*colors)[static_cast<std::size_t>(i)].data(), 3);
    }
  }
  for (long f = 0; f < t.rows(); ++f) {
    if (enc == PlyEncoding::kAscii) {
      out += "3 " + std::to_string(t(f, 0)) + ' ' + std::to_string(t(f, 1)) + ' ' + std::to_string(t(f, 2)) + '\n';
    } else {
      const std::uint8_t three = 3;
      put_le(out, &three, 1);
      for (int c = 0; c < 3; ++c) {
        const std::int32_t idx = t(f, c);
        put_le(out, &idx, 4);
      }
    }
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

MeshFormat format_from_path(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".off") return MeshFormat::kOff;
  if (ext == ".obj") return MeshFormat::kObj;
  if (ext == ".ply") return MeshFormat::kPly;
  throw DataError("unrecognised mesh extension '" + ext + "' for '" + path.string() + "'");
}

Mesh parse_mesh(std::string_view bytes, MeshFormat format) {
  switch (format) {
    case MeshFormat::kOff: return parse_off(bytes);
    case MeshFormat::kObj: return parse_obj(bytes);
    case MeshFormat::kPly: return parse_ply(bytes);
  }
  throw UsageError("unknown mesh format");
}

std::string serialize_mesh(const Mesh& mesh, MeshFormat format, PlyEncoding encoding) {
  const auto& v = mesh.vertices();
  const auto& t = mesh.triangles();
  std::string out;
  switch (format) {
    case MeshFormat::kOff:
      out = "OFF\n" + std::to_string(v.rows()) + ' ' + std::to_string(t.rows()) + " 0\n";
      for (long i = 0; i < v.rows(); ++i) {
        append_double(out, v(i, 0));
        out += ' ';
        append_double(out, v(i, 1));
        out += ' ';
        append_double(out, v(i, 2));
        out += '\n';
      }
      for (long f = 0; f < t.rows(); ++f) {
        out += "3 " + std::to_string(t(f, 0)) + ' ' + std::to_string(t(f, 1)) + ' ' + std::to_string(t(f, 2)) + '\n';
      }
      return out;
    case MeshFormat::kObj:
      for (long i = 0; i < v.rows(); ++i) {
        out += "v ";
        append_double(out, v(i, 0));
        out += ' ';
        append_double(out, v(i, 1));
        out += ' ';
        append_double(out, v(i, 2));
        out += '\n';
      }
      for (long f = 0; f < t.rows(); ++f) {
        out += "f " + std::to_string(t(f, 0) + 1) + ' ' + std::to_string(t(f, 1) + 1) + ' ' +
               std::to_string(t(f, 2) + 1) + '\n';
      }
      return out;
    case MeshFormat::kPly: return ply_body(mesh, nullptr, encoding);
  }
  throw UsageError("unknown mesh format");
}

std::string serialize_colored_ply(const Mesh& mesh, const std::vector<std::array<std::uint8_t, 3>>& colors,
                                  PlyEncoding encoding) {
  if (colors.size() != static_cast<std::size_t>(mesh.num_vertices())) {
    throw DataError("colour count does not match vertex count");
  }
  return ply_body(mesh, &colors, encoding);
}

Mesh read_mesh(const std::filesystem::path& path) {
  const MeshFormat fmt = format_from_path(path);
  try {
    return parse_mesh(read_file(path), fmt);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_mesh(const Mesh& mesh, const std::filesystem::path& path, PlyEncoding encoding) {
  write_file(path, serialize_mesh(mesh, format_from_path(path), encoding));
}

IndexMap parse_index_text(std::string_view text) {
  IndexMap out;
  for (const auto& line : tokenize(text)) {
    if (line.tokens.size() != 1) fail_line("index file", line.line_no, "expected one index per line");
    const long v = parse_number<long>(line.tokens[0], "index file", line.line_no);
    if (v < 0) fail_line("index file", line.line_no, "negative index");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::string format_index_text(const IndexMap& map) {
  std::string out;
  out.reserve(map.size() * 6);
  for (int v : map) {
    out += std::to_string(v);
    out += '\n';
  }
  return out;
}

IndexMap read_index_file(const std::filesystem::path& path) {
  try {
    return parse_index_text(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_index_file(const IndexMap& map, const std::filesystem::path& path) {
  write_file(path, format_index_text(map));
}

}  // namespace rino
