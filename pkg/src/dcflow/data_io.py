"""Dataset ingestion and serialization.

CIF support is a deliberately small subset aimed at disorder-annotated
entries: the cell block, an optional explicit symmetry-operation list
(otherwise P1), and the atom-site loop with occupancy and disorder
group/assembly tags.  Rows at coinciding coordinates merge into
substitutionally disordered sites; rows in the same disorder assembly (or
unlabeled same-composition neighbors) with complementary occupancies merge
into positionally disordered sites.  Structures the subset cannot express are
rejected with a reason rather than silently mangled.

The canonical on-disk form is JSONL, one crystal per line; floats round-trip
exactly through Python's shortest-repr encoding.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .crystal import (DEFAULT_VOCAB, DisorderedCrystal, LatticeParams,
                      from_ordered, make_crystal, make_lattice, make_site)
from .elements import symbol_of, z_of
from .geometry import lattice_matrix, wrap

COORD_MERGE_TOL = 1e-4      # fractional coincidence tolerance for SD merging
PD_PAIR_MAX_ANGSTROM = 1.0  # unlabeled PD pairing radius
OCC_SUM_TOL = 1e-3


class CifParseError(ValueError):
    """Raised when a CIF entry cannot be expressed in the data model."""


class DataFormatError(ValueError):
    """Raised on malformed JSONL records."""


@dataclass
class Dataset:
    crystals: list[DisorderedCrystal]
    labels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.crystals)

    def subset(self, label: str) -> "Dataset":
        if self.labels is None:
            raise ValueError("dataset has no split labels")
        picked = [c for c, lab in zip(self.crystals, self.labels) if lab == label]
        return Dataset(picked, labels=[label] * len(picked), meta=dict(self.meta))


# ---------------------------------------------------------------------------
# CIF parsing
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)(\(\d+\))?$")


def _cif_number(token: str) -> float:
    """Numeric CIF value; trailing parenthesized uncertainties are dropped."""
    if not _NUM_RE.match(token):
        raise CifParseError(f"expected a number, got {token!r}")
    return float(token.split("(")[0])


def _tokenize(line: str) -> list[str]:
    """Whitespace split honoring single/double quoted fields."""
    tokens, cur, quote = [], [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
            else:
                cur.append(ch)
        elif ch in "'\"":
            quote = ch
        elif ch.isspace():
            if cur:
                tokens.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        tokens.append("".join(cur))
    return tokens


def _parse_blocks(text: str) -> tuple[dict, list[dict]]:
    """Scalar key/value items and loop blocks (as name->column dicts)."""
    items: dict[str, str] = {}
    loops: list[dict] = []
    lines = [ln.strip() for ln in text.splitlines()]
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line or line.startswith("#"):
            i += 1
            continue
        if line.lower() == "loop_":
            i += 1
            names = []
            while i < len(lines) and lines[i].startswith("_"):
                names.append(lines[i].split()[0].lower())
                i += 1
            rows = []
            while i < len(lines):
                row = lines[i]
                if (not row or row.startswith(("#",))
                        or row.lower() == "loop_" or row.startswith(("_", "data_"))):
                    break
                tokens = _tokenize(row)
                if tokens:
                    rows.append(tokens)
                i += 1
            columns: dict[str, list[str]] = {name: [] for name in names}
            for tokens in rows:
                if len(tokens) < len(names):
                    raise CifParseError(f"malformed loop row: {tokens}")
                for name, tok in zip(names, tokens):
                    columns[name].append(tok)
            loops.append(columns)
            continue
        if line.startswith("_"):
            tokens = _tokenize(line)
            if len(tokens) >= 2:
                items[tokens[0].lower()] = tokens[1]
        i += 1
    return items, loops


_SYMOP_TERM = re.compile(r"([+-]?)(\d+/\d+|\d+\.?\d*|[xyz])")


def _apply_symop(op: str, f: np.ndarray) -> np.ndarray:
    """Evaluate an 'x,y,z'-style operation at a fractional coordinate."""
    out = np.zeros(3)
    parts = op.lower().replace(" ", "").split(",")
    if len(parts) != 3:
        raise CifParseError(f"malformed symmetry operation {op!r}")
    for axis, expr in enumerate(parts):
        total = 0.0
        for sign, term in _SYMOP_TERM.findall(expr):
            factor = -1.0 if sign == "-" else 1.0
            if term in "xyz":
                total += factor * f["xyz".index(term)]
            elif "/" in term:
                num, den = term.split("/")
                total += factor * float(num) / float(den)
            else:
                total += factor * float(term)
        out[axis] = total
    return out % 1.0


@dataclass
class _Row:
    z: int
    occ: float
    coords: np.ndarray
    assembly: str | None


@dataclass
class _ProtoSite:
    coords: np.ndarray
    amounts: dict[int, float]
    assemblies: set[str]

    @property
    def occupancy(self) -> float:
        return sum(self.amounts.values())

    def species_key(self) -> tuple[tuple[int, float], ...]:
        total = self.occupancy
        return tuple(sorted((z, round(a / total, 6)) for z, a in self.amounts.items()))


def parse_cif(text: str, min_atoms: int = 3, max_atoms: int = 50,
              l_max: int = 2, element_vocab=DEFAULT_VOCAB) -> DisorderedCrystal:
    items, loops = _parse_blocks(text)
    try:
        lattice = make_lattice(*(_cif_number(items[k]) for k in (
            "_cell_length_a", "_cell_length_b", "_cell_length_c",
            "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma")))
    except KeyError as exc:
        raise CifParseError(f"missing cell item {exc}") from exc
    except ValueError as exc:
        raise CifParseError(str(exc)) from exc

    symops = ["x,y,z"]
    for loop in loops:
        for key in ("_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz"):
            if key in loop:
                symops = loop[key]

    site_loop = next((lp for lp in loops if "_atom_site_fract_x" in lp), None)
    if site_loop is None:
        raise CifParseError("no atom-site loop")

    def column(name: str, default: str | None = None) -> list[str]:
        if name in site_loop:
            return site_loop[name]
        n = len(site_loop["_atom_site_fract_x"])
        if default is None:
            raise CifParseError(f"missing column {name}")
        return [default] * n

    symbols = (site_loop.get("_atom_site_type_symbol")
               or column("_atom_site_label"))
    occs = column("_atom_site_occupancy", "1.0")
    assemblies = column("_atom_site_disorder_assembly", ".")
    # Disorder-group tags mark the alternative within an assembly, not the
    # disordered unit itself; rows carrying only a group tag fall back to the
    # unlabeled proximity heuristic.
    rows: list[_Row] = []
    for idx in range(len(symbols)):
        try:
            z = z_of(symbols[idx])
        except KeyError as exc:
            raise CifParseError(str(exc)) from exc
        if z not in element_vocab:
            raise CifParseError(f"element Z={z} outside vocabulary")
        occ_tok = occs[idx]
        occ = 1.0 if occ_tok in (".", "?") else _cif_number(occ_tok)
        base = np.array([_cif_number(site_loop[f"_atom_site_fract_{ax}"][idx])
                         for ax in "xyz"]) % 1.0
        assembly = assemblies[idx] if assemblies[idx] not in (".", "?") else None
        seen: list[np.ndarray] = []
        for op in symops:
            f = _apply_symop(op, base)
            if any(np.max(np.abs(wrap(f - g))) < COORD_MERGE_TOL for g in seen):
                continue
            seen.append(f)
            rows.append(_Row(z=z, occ=occ, coords=f, assembly=assembly))

    # SD merge: rows sharing a coordinate become one site with summed amounts.
    protos: list[_ProtoSite] = []
    for row in rows:
        for proto in protos:
            if np.max(np.abs(wrap(row.coords - proto.coords))) < COORD_MERGE_TOL:
                proto.amounts[row.z] = proto.amounts.get(row.z, 0.0) + row.occ
                if row.assembly:
                    proto.assemblies.add(row.assembly)
                break
        else:
            protos.append(_ProtoSite(coords=row.coords,
                                     amounts={row.z: row.occ},
                                     assemblies={row.assembly} if row.assembly else set()))

    for proto in protos:
        if proto.occupancy > 1.0 + OCC_SUM_TOL:
            raise CifParseError(
                f"site occupancy {proto.occupancy:.4f} exceeds 1 at {proto.coords}")

    sites = _merge_pd(protos, lattice, l_max)

    if not min_atoms <= len(sites) <= max_atoms:
        raise CifParseError(f"site count {len(sites)} outside [{min_atoms}, {max_atoms}]")

    index_of = {z: k for k, z in enumerate(element_vocab)}
    built = []
    for positions, pos_weights, amounts in sites:
        s = np.zeros(len(element_vocab))
        for z, amt in amounts.items():
            s[index_of[z]] = amt
        pos_block = np.zeros((l_max, 3))
        pos_block[:len(positions)] = positions
        w = np.zeros(l_max)
        w[:len(pos_weights)] = pos_weights
        try:
            built.append(make_site(s, pos_block, w))
        except ValueError as exc:
            raise CifParseError(f"partial occupancy not representable: {exc}") from exc
    try:
        return make_crystal(lattice, built, element_vocab=element_vocab)
    except ValueError as exc:
        raise CifParseError(str(exc)) from exc


def _merge_pd(protos: list[_ProtoSite], lattice: LatticeParams,
              l_max: int) -> list[tuple[list[np.ndarray], list[float], dict]]:
    """Group alternative-position sites: shared assembly labels first, then
    unlabeled same-composition neighbors with complementary occupancies."""
    lat_m = lattice_matrix(lattice)
    used = [False] * len(protos)
    groups: list[list[int]] = []

    by_assembly: dict[str, list[int]] = {}
    for i, proto in enumerate(protos):
        for label in proto.assemblies:
            by_assembly.setdefault(label, []).append(i)
    for label, members in by_assembly.items():
        fresh = [i for i in members if not used[i]]
        if len(fresh) >= 2:
            for i in fresh:
                used[i] = True
            groups.append(fresh)

    for i, proto in enumerate(protos):
        if used[i]:
            continue
        total = proto.occupancy
        if total >= 1.0 - OCC_SUM_TOL:
            continue
        partners = [i]
        for j in range(i + 1, len(protos)):
            other = protos[j]
            if used[j] or other.occupancy >= 1.0 - OCC_SUM_TOL:
                continue
            if other.species_key() != proto.species_key():
                continue
            d = np.linalg.norm(lat_m @ wrap(other.coords - proto.coords))
            if d > PD_PAIR_MAX_ANGSTROM:
                continue
            if total + other.occupancy > 1.0 + OCC_SUM_TOL:
                continue
            partners.append(j)
            total += other.occupancy
        if len(partners) >= 2 and abs(total - 1.0) <= OCC_SUM_TOL:
            for j in partners:
                used[j] = True
            groups.append(partners)

    out = []
    for members in groups:
        members = sorted(members, key=lambda i: -protos[i].occupancy)
        if len(members) > l_max:
            raise CifParseError(
                f"positional disorder order {len(members)} exceeds l_max={l_max}")
        total = sum(protos[i].occupancy for i in members)
        if abs(total - 1.0) > OCC_SUM_TOL:
            raise CifParseError(
                f"disorder assembly occupancies sum to {total:.4f}, not 1")
        ref = protos[members[0]]
        key = ref.species_key()
        if any(protos[i].species_key() != key for i in members[1:]):
            raise CifParseError("assembly mixes species across split positions")
        positions = [protos[i].coords for i in members]
        weights = [protos[i].occupancy / total for i in members]
        amounts = {z: a / ref.occupancy for z, a in ref.amounts.items()}
        out.append((positions, weights, amounts))
    for i, proto in enumerate(protos):
        if not used[i]:
            if abs(proto.occupancy - 1.0) > OCC_SUM_TOL:
                raise CifParseError(
                    f"unpaired partial occupancy {proto.occupancy:.4f} at {proto.coords}")
            out.append(([proto.coords], [1.0],
                        {z: a / proto.occupancy for z, a in proto.amounts.items()}))
    return out


def write_cif(crystal: DisorderedCrystal, name: str = "dcflow") -> str:
    """Minimal CIF emitter covering exactly the subset `parse_cif` reads.

    Each occupied coordinate channel becomes one row per element carrying
    occupancy s_k * w_ch; split-position sites share a disorder assembly
    label so the parser regroups them.
    """
    lat = crystal.lattice
    lines = [f"data_{name}"]
    for key, val in (("_cell_length_a", lat.a), ("_cell_length_b", lat.b),
                     ("_cell_length_c", lat.c), ("_cell_angle_alpha", lat.alpha),
                     ("_cell_angle_beta", lat.beta), ("_cell_angle_gamma", lat.gamma)):
        lines.append(f"{key} {val:.6f}")
    lines.append("loop_")
    lines += ["_atom_site_label", "_atom_site_type_symbol",
              "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z",
              "_atom_site_occupancy", "_atom_site_disorder_assembly"]
    counter = 0
    assembly_counter = 0
    for site in crystal.sites:
        assembly = "."
        if site.is_pd:
            assembly = chr(ord("A") + assembly_counter % 26)
            assembly_counter += 1
        for ch in np.flatnonzero(site.pos_weights > 0.0):
            x, y, z = site.positions[ch]
            for k in np.flatnonzero(site.s > 0.0):
                symbol = symbol_of(crystal.element_vocab[k])
                occ = float(site.s[k] * site.pos_weights[ch])
                counter += 1
                lines.append(f"{symbol}{counter} {symbol} {x:.6f} {y:.6f} "
                             f"{z:.6f} {occ:.6f} {assembly}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def crystal_to_record(crystal: DisorderedCrystal, meta: dict | None = None) -> dict:
    lat = crystal.lattice
    sites = []
    for site in crystal.sites:
        entries = [{"z": int(crystal.element_vocab[k]), "p": float(site.s[k])}
                   for k in np.flatnonzero(site.s > 0.0)]
        sites.append({"s": entries,
                      "positions": [[float(x) for x in row] for row in site.positions],
                      "pos_weights": [float(w) for w in site.pos_weights]})
    record = {"lattice": {k: float(getattr(lat, k))
                          for k in ("a", "b", "c", "alpha", "beta", "gamma")},
              "sites": sites, "meta": meta or {}}
    return record


def crystal_from_record(record: dict, element_vocab=DEFAULT_VOCAB) -> tuple[DisorderedCrystal, dict]:
    try:
        lat = record["lattice"]
        lattice = make_lattice(lat["a"], lat["b"], lat["c"],
                               lat["alpha"], lat["beta"], lat["gamma"])
        index_of = {z: k for k, z in enumerate(element_vocab)}
        sites = []
        for entry in record["sites"]:
            s = np.zeros(len(element_vocab))
            for item in entry["s"]:
                s[index_of[int(item["z"])]] = float(item["p"])
            positions = np.asarray(entry["positions"], dtype=float)
            weights = np.asarray(entry["pos_weights"], dtype=float)
            sites.append(make_site(s, positions, weights))
        crystal = make_crystal(lattice, sites, element_vocab=element_vocab)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(str(exc)) from exc
    return crystal, record.get("meta", {})


def write_jsonl(dataset: Dataset, path: str) -> None:
    with open(path, "w") as fh:
        for i, crystal in enumerate(dataset.crystals):
            meta = {"split": dataset.labels[i]} if dataset.labels is not None else {}
            fh.write(json.dumps(crystal_to_record(crystal, meta)) + "\n")


def read_jsonl(path: str, element_vocab=DEFAULT_VOCAB) -> Dataset:
    crystals, labels = [], []
    any_label = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                crystal, meta = crystal_from_record(record, element_vocab)
            except (json.JSONDecodeError, DataFormatError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            crystals.append(crystal)
            label = meta.get("split")
            any_label = any_label or label is not None
            labels.append(label if label is not None else "train")
    return Dataset(crystals, labels=labels if any_label else None)


# ---------------------------------------------------------------------------
# Splitting and augmentation
# ---------------------------------------------------------------------------

def split(dataset: Dataset, seed: int,
          fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dataset:
    """Deterministic shuffled split.  Train and validation counts round to
    nearest; the test split takes the remainder (9096 -> 7277/910/909)."""
    if not dataset.crystals:
        raise ValueError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1: {fractions}")
    n = len(dataset.crystals)
    n_train = round(n * fractions[0])
    n_val = round(n * fractions[1])
    n_test = n - n_train - n_val
    if n_test < 0:
        raise ValueError("rounded fractions exceed the dataset size")
    order = np.random.default_rng(seed).permutation(n)
    labels = [""] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return Dataset(list(dataset.crystals), labels=labels, meta=dict(dataset.meta))


def augment_ordered(dataset: Dataset, ordered_set: list) -> Dataset:
    """Append ordered structures (element/coordinate/lattice triples or ready
    crystals) to the training split only; validation and test stay fixed."""
    if dataset.labels is None:
        raise ValueError("augmentation requires a split dataset")
    l_max = dataset.crystals[0].l_max if dataset.crystals else 2
    vocab = dataset.crystals[0].element_vocab if dataset.crystals else DEFAULT_VOCAB
    crystals = list(dataset.crystals)
    labels = list(dataset.labels)
    for item in ordered_set:
        if isinstance(item, DisorderedCrystal):
            if item.element_vocab != vocab:
                raise ValueError("vocabulary mismatch in ordered set")
            crystal = item if item.l_max == l_max else None
            if crystal is None:
                from .crystal import pad_to_order
                crystal = pad_to_order(item, l_max)
        else:
            elements, coords, lattice = item
            crystal = from_ordered(elements, coords, lattice,
                                   element_vocab=vocab, l_max=l_max)
        crystals.append(crystal)
        labels.append("train")
    return Dataset(crystals, labels=labels, meta=dict(dataset.meta))


# ---------------------------------------------------------------------------
# Synthetic toy data
# ---------------------------------------------------------------------------

@dataclass
class ToyTemplate:
    """Small parametric cell for acceptance-scale experiments."""

    lattice: LatticeParams
    site_species: list[list[tuple[int, float]]]   # per site: (Z, probability)
    site_positions: list[list[tuple[float, float, float]]]
    site_pos_weights: list[list[float]]
    l_max: int = 2

    def build(self, element_vocab=DEFAULT_VOCAB) -> DisorderedCrystal:
        index_of = {z: k for k, z in enumerate(element_vocab)}
        sites = []
        for species, positions, weights in zip(self.site_species,
                                               self.site_positions,
                                               self.site_pos_weights, strict=True):
            s = np.zeros(len(element_vocab))
            for z, p in species:
                s[index_of[z]] = p
            pos = np.zeros((self.l_max, 3))
            pos[:len(positions)] = positions
            w = np.zeros(self.l_max)
            w[:len(weights)] = weights
            sites.append(make_site(s, pos, w))
        return make_crystal(self.lattice, sites, element_vocab=element_vocab)


def default_toy_template(with_pd: bool = False) -> ToyTemplate:
    """Four-site cell with one 50/50 substitutional site (Sr/Ba) and
    optionally one binary split position.

    Sites occupy general positions (no special Wyckoff-like coordinates), so
    the structure has a unique geometric mode up to translation; pairwise
    distances stay near 2 Angstrom in the 4 Angstrom cell.
    """
    sites_species = [[(38, 0.5), (56, 0.5)], [(22, 1.0)], [(8, 1.0)], [(19, 1.0)]]
    positions = [[(0.05, 0.10, 0.15)], [(0.55, 0.60, 0.40)],
                 [(0.30, 0.75, 0.80)], [(0.80, 0.30, 0.70)]]
    weights = [[1.0], [1.0], [1.0], [1.0]]
    if with_pd:
        positions[3] = [(0.80, 0.30, 0.70), (0.80, 0.30, 0.82)]
        weights[3] = [0.7, 0.3]
    return ToyTemplate(lattice=make_lattice(4.0, 4.0, 4.0, 90.0, 90.0, 90.0),
                       site_species=sites_species, site_positions=positions,
                       site_pos_weights=weights)


def make_toy_dataset(template: ToyTemplate, n: int, noise: float,
                     rng: np.random.Generator,
                     element_vocab=DEFAULT_VOCAB) -> Dataset:
    """n jittered copies: wrapped-normal coordinate noise and +/-2% cell-length
    jitter; occupancies stay at the template values."""
    base = template.build(element_vocab)
    crystals = []
    for _ in range(n):
        lengths = base.lattice.lengths() * (1.0 + rng.uniform(-0.02, 0.02, size=3))
        lattice = make_lattice(*lengths, *base.lattice.angles())
        sites = []
        for site in base.sites:
            pos = site.positions.copy()
            active = site.pos_weights > 0.0
            pos[active] = (pos[active] + rng.normal(0.0, noise, size=pos[active].shape)) % 1.0
            sites.append(make_site(site.s, pos, site.pos_weights))
        crystals.append(make_crystal(lattice, sites, element_vocab=element_vocab))
    return Dataset(crystals, meta={"template": "toy", "noise": noise})
