"""
Tests for COCO-style annotation files, manifests and the scene dataset
"""

import json

import numpy as np
import pytest
import torch

from src.data.annotation_io import (
    AnnotationParseError, AnnotationValidationError, SceneRecord, load_annotations, load_manifest,
    write_annotations
)
from src.data.scene_dataset import SceneDataset, collate_scenes
from src.data.scene_generator import DatasetSpec, generate_scene, save_png, scene_rng
from src.geometry.box_ops import Box, LabeledBox


def write_payload(tmp_path, payload) -> str:
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def payload_with(bbox, width=64, height=64):
    return {
        "images": [{"id": 1, "file_name": "a.png", "width": width, "height": height}],
        "annotations": [{"id": 7, "image_id": 1, "bbox": bbox, "category_id": 1}],
        "categories": [{"id": 1, "name": "cell"}],
    }


class TestRoundTrip:
    def test_generated_boxes_survive(self, tmp_path):
        spec = DatasetSpec(image_size=64)
        records = []
        for index in range(5):
            scene = generate_scene(spec, scene_rng(spec, "train", index), f"s{index}")
            path = tmp_path / f"s{index}.png"
            save_png(scene.image, path)
            records.append(SceneRecord(index, f"s{index}", path, 64, 64, scene.gt))

        loaded = load_annotations(write_annotations(records, spec.names(), tmp_path / "ann" / "train.json"))
        assert loaded.class_names == spec.names()
        for original, restored in zip(records, loaded):
            assert restored.gt == original.gt
            assert restored.scene_id == original.scene_id
            assert restored.image_path.resolve() == original.image_path.resolve()

    def test_manifest_splits_load(self, tiny_manifest_path):
        manifest = load_manifest(tiny_manifest_path)
        train = manifest.load_split("train")
        assert train.num_classes == 3
        assert train[0].load_image().shape == (64, 64, 3)
        with pytest.raises(KeyError):
            manifest.load_split("holdout")

    def test_file_field_is_accepted(self, tmp_path):
        payload = payload_with([1, 2, 10, 10])
        payload["images"][0] = {"id": 1, "file": "b.png", "width": 64, "height": 64}
        loaded = load_annotations(write_payload(tmp_path, payload))
        assert loaded[0].image_path.name == "b.png"

    def test_category_ids_become_contiguous(self, tmp_path):
        payload = payload_with([1, 2, 10, 10])
        payload["categories"] = [{"id": 9, "name": "late"}, {"id": 3, "name": "early"}]
        payload["annotations"][0]["category_id"] = 9
        loaded = load_annotations(write_payload(tmp_path, payload))
        assert loaded.class_names == ["early", "late"]
        assert loaded[0].gt[0].class_id == 1


class TestValidation:
    def test_empty_annotation_list(self, tmp_path):
        payload = payload_with([1, 2, 10, 10])
        payload["annotations"] = []
        loaded = load_annotations(write_payload(tmp_path, payload))
        assert len(loaded) == 1 and loaded[0].gt == []

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "images": [\n    {"id": 1,,}\n  ]\n}', encoding="utf-8")
        with pytest.raises(AnnotationParseError, match=":3:"):
            load_annotations(path)

    def test_non_positive_width(self, tmp_path):
        with pytest.raises(AnnotationValidationError, match="annotation 7"):
            load_annotations(write_payload(tmp_path, payload_with([10, 10, 0, 5])))

    def test_out_of_bounds_box(self, tmp_path):
        with pytest.raises(AnnotationValidationError, match="annotation 7"):
            load_annotations(write_payload(tmp_path, payload_with([60, 10, 10, 5])))

    def test_schema_violation(self, tmp_path):
        payload = payload_with([1, 2, 3])
        with pytest.raises(AnnotationValidationError):
            load_annotations(write_payload(tmp_path, payload))

    def test_unknown_category_and_image(self, tmp_path):
        payload = payload_with([1, 2, 10, 10])
        payload["annotations"][0]["category_id"] = 4
        with pytest.raises(AnnotationValidationError, match="category_id"):
            load_annotations(write_payload(tmp_path, payload))
        payload = payload_with([1, 2, 10, 10])
        payload["annotations"][0]["image_id"] = 2
        with pytest.raises(AnnotationValidationError, match="image_id"):
            load_annotations(write_payload(tmp_path, payload))

    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"num_classes": 2}), encoding="utf-8")
        with pytest.raises(AnnotationValidationError):
            load_manifest(path)


class TestSceneDataset:
    def test_items_and_collate(self, tiny_manifest):
        dataset = SceneDataset(tiny_manifest.load_split("train").scenes)
        image, boxes, labels, scene_id = dataset[0]
        assert image.shape == (3, 64, 64) and image.dtype == torch.float32
        assert boxes.shape == (labels.shape[0], 4)
        assert scene_id == "train_00000"

        images, box_list, label_list, ids = collate_scenes([dataset[0], dataset[1]])
        assert images.shape == (2, 3, 64, 64)
        assert len(box_list) == len(label_list) == len(ids) == 2

    def test_scene_without_boxes(self, tmp_path):
        path = tmp_path / "empty.png"
        save_png(np.zeros((32, 32, 3)), path)
        _, boxes, labels, _ = SceneDataset([SceneRecord(0, "empty", path, 32, 32)])[0]
        assert boxes.shape == (0, 4) and labels.shape == (0,)

    def test_boxes_match_records(self, tmp_path):
        path = tmp_path / "one.png"
        save_png(np.ones((32, 32, 3)), path)
        record = SceneRecord(0, "one", path, 32, 32, [LabeledBox(Box(1.5, 2.0, 10.0, 12.5), 2)])
        _, boxes, labels, _ = SceneDataset([record])[0]
        assert boxes.tolist() == [[1.5, 2.0, 10.0, 12.5]]
        assert labels.tolist() == [2]
