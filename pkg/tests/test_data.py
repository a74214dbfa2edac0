import numpy as np
import pytest

from mpep.data import DatasetError, StratumKey, load_dataset, parse_dataset, save_dataset
from mpep.synthetic import skeleton

HEADER = ("sex,age_group,year,region,n_c,P,t_on,t_off,t_o,x_o,t_d,"
          "x_c_on_deaths,x_c_off_deaths,x_e_deaths")


def _rows(override=None, shape=(2, 1, 2, 1)):
    override = override or {}
    lines = [HEADER]
    sexes = ["female", "male"][: shape[0]]
    for sex in sexes:
        for a in range(shape[1]):
            for y in range(shape[2]):
                for r in range(shape[3]):
                    vals = dict(n_c=100, P=10000, t_on=40, t_off=50, t_o="", x_o=2,
                                t_d=1.5, on=1, off=2, xe=5)
                    vals.update(override.get((sex, a, y, r), {}))
                    lines.append(f"{sex},A{a + 1},{y},{r},{vals['n_c']},{vals['P']},"
                                 f"{vals['t_on']},{vals['t_off']},{vals['t_o']},"
                                 f"{vals['x_o']},{vals['t_d']},{vals['on']},"
                                 f"{vals['off']},{vals['xe']}")
    return lines


class TestParse:
    def test_well_formed(self):
        ds = parse_dataset("\n".join(_rows()))
        assert ds.shape == (2, 1, 2, 1)
        assert ds.events == ("deaths",)
        assert ds.deaths_event == "deaths"
        assert ds.levels["sex"] == ("female", "male")
        np.testing.assert_array_equal(ds.t_o, ds.t_off)  # empty t_o means t_off

    def test_paper_scale_row_count(self):
        ds = skeleton((2, 3, 9, 8), ["deaths", "hospitalisations"])
        text = ds.to_csv()
        assert len(parse_dataset(text)) == 432

    def test_missing_stratum_named(self):
        lines = _rows()
        del lines[2]
        with pytest.raises(DatasetError, match="missing stratum.*'year': '1'"):
            parse_dataset("\n".join(lines))

    def test_duplicate_stratum(self):
        lines = _rows()
        lines.append(lines[1])
        with pytest.raises(DatasetError, match="row 6: duplicate stratum"):
            parse_dataset("\n".join(lines))

    def test_t_d_above_extra_deaths(self):
        lines = _rows({("male", 0, 1, 0): {"t_d": 6, "xe": 5}})
        with pytest.raises(DatasetError, match="row 5:.*t_d = 6.0 exceeds extra deaths"):
            parse_dataset("\n".join(lines))

    def test_negative_count(self):
        lines = _rows({("female", 0, 0, 0): {"x_o": -1}})
        with pytest.raises(DatasetError, match="row 2:.*x_o.*negative"):
            parse_dataset("\n".join(lines))

    def test_cohort_larger_than_population(self):
        lines = _rows({("female", 0, 1, 0): {"n_c": 20000}})
        with pytest.raises(DatasetError, match="n_c exceeds"):
            parse_dataset("\n".join(lines))

    def test_person_time_exceeds_cohort(self):
        lines = _rows({("female", 0, 1, 0): {"t_on": 80, "t_off": 30}})
        with pytest.raises(DatasetError, match="t_on \\+ t_off exceeds n_c"):
            parse_dataset("\n".join(lines))

    def test_non_integer_count(self):
        lines = _rows({("female", 0, 1, 0): {"on": 1.5}})
        with pytest.raises(DatasetError, match="not an integer"):
            parse_dataset("\n".join(lines))

    def test_non_numeric(self):
        lines = _rows({("female", 0, 1, 0): {"P": "many"}})
        with pytest.raises(DatasetError, match="not a number"):
            parse_dataset("\n".join(lines))

    @pytest.mark.parametrize("text, msg", [
        ("", "header"),
        (HEADER, "no data rows"),
        ("sex,age_group,year,region\nf,A1,0,0", "lacks required columns"),
    ])
    def test_structural_errors(self, text, msg):
        with pytest.raises(DatasetError, match=msg):
            parse_dataset(text)

    def test_no_deaths_event(self):
        text = "\n".join(_rows()).replace("_deaths", "_hosp")
        ds = parse_dataset(text)
        assert ds.deaths_event is None

    def test_numeric_levels_sorted_numerically(self):
        lines = [HEADER]
        for y in (10, 9, 2):
            lines.append(f"female,A1,{y},0,10,100,1,1,,0,0,0,0,0")
        ds = parse_dataset("\n".join(lines))
        assert ds.levels["year"] == ("2", "9", "10")


class TestDataset:
    def test_round_trip(self, tmp_path, desk_data):
        path = tmp_path / "d.csv"
        save_dataset(desk_data, path)
        back = load_dataset(path)
        assert back.digest() == desk_data.digest()
        for name in ("n_c", "P", "t_on", "t_off", "t_o", "x_o", "t_d", "x_e", "x_c_on"):
            np.testing.assert_array_equal(getattr(back, name), getattr(desk_data, name))

    def test_arrays_read_only(self, desk_data):
        with pytest.raises(ValueError):
            desk_data.n_c[0] = 1.0

    def test_lookup_by_key(self, desk_data):
        key = StratumKey(1, 2, 0, 1)
        row = desk_data[key]
        s = desk_data.keys().index(key)
        assert row.n_c == desk_data.n_c[s]
        assert row.x_e["hospitalisations"] == desk_data.x_e[1, s]

    def test_row_order_irrelevant(self, desk_data, rng):
        lines = desk_data.to_csv().strip().split("\n")
        body = lines[1:]
        shuffled = [lines[0]] + [body[i] for i in rng.permutation(len(body))]
        assert parse_dataset("\n".join(shuffled)).digest() == desk_data.digest()
