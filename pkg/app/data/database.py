#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行记录数据库模块
记录每次命令运行及其评估指标，供绘图数据导出查询
"""

import sqlite3
import json
import logging
import os
from typing import List, Dict, Optional

from app.config import DATABASE_NAME, DATABASE_PATH

logger = logging.getLogger(__name__)

RUN_STATUSES = ('running', 'completed', 'failed')


class RunLedger:
    """运行记录管理器"""

    def __init__(self, db_path: str = None):
        """初始化运行记录数据库"""
        if db_path is None:
            db_path = os.path.join(DATABASE_PATH, DATABASE_NAME)

        self.db_path = db_path
        self._ensure_database_exists()
        self._create_tables()

    def _ensure_database_exists(self):
        """确保数据库目录存在"""
        directory = os.path.dirname(os.path.abspath(self.db_path))
        os.makedirs(directory, exist_ok=True)

    def _get_connection(self) -> sqlite3.Connection:
        """获取数据库连接"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _create_tables(self):
        """创建数据库表"""
        with self._get_connection() as conn:
            # 运行表
            conn.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    command TEXT NOT NULL,
                    config_hash TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    out_dir TEXT,
                    status TEXT DEFAULT 'running',
                    details TEXT,
                    started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                    finished_at TIMESTAMP
                )
            ''')

            # 指标表
            conn.execute('''
                CREATE TABLE IF NOT EXISTS metrics (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    group_id TEXT NOT NULL,
                    group_size INTEGER NOT NULL,
                    name TEXT NOT NULL,
                    value REAL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            ''')

            conn.commit()

    def start_run(self, command: str, config_hash: str, seed: int, out_dir: str = None) -> int:
        """登记一次运行，返回运行编号"""
        with self._get_connection() as conn:
            cursor = conn.execute('''
                INSERT INTO runs (command, config_hash, seed, out_dir)
                VALUES (?, ?, ?, ?)
            ''', (command, config_hash, seed, out_dir))
            conn.commit()
            return cursor.lastrowid

    def finish_run(self, run_id: int, status: str = 'completed', details: Dict = None):
        """更新运行状态"""
        if status not in RUN_STATUSES:
            raise ValueError(f"未知运行状态: {status}")
        with self._get_connection() as conn:
            conn.execute('''
                UPDATE runs SET status = ?, details = ?, finished_at = CURRENT_TIMESTAMP
                WHERE id = ?
            ''', (status, json.dumps(details or {}, ensure_ascii=False), run_id))
            conn.commit()

    def get_run(self, run_id: int) -> Optional[Dict]:
        """根据编号获取运行信息"""
        with self._get_connection() as conn:
            cursor = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,))
            row = cursor.fetchone()
            if not row:
                return None
            run = dict(row)
            run['details'] = json.loads(run['details']) if run['details'] else {}
            return run

    def get_runs(self, command: str = None, limit: int = 20) -> List[Dict]:
        """获取最近的运行记录"""
        with self._get_connection() as conn:
            if command:
                cursor = conn.execute('''
                    SELECT * FROM runs WHERE command = ? ORDER BY id DESC LIMIT ?
                ''', (command, limit))
            else:
                cursor = conn.execute('SELECT * FROM runs ORDER BY id DESC LIMIT ?', (limit,))
            return [dict(row) for row in cursor.fetchall()]

    def add_metrics(self, run_id: int, group_id: str, record: Dict[str, float]):
        """写入一条评估记录（group_size必须在record中）"""
        if 'group_size' not in record:
            raise ValueError("评估记录缺少group_size")
        size = int(record['group_size'])
        rows = [(run_id, group_id, size, name, float(value))
                for name, value in record.items() if name != 'group_size']
        with self._get_connection() as conn:
            conn.executemany('''
                INSERT INTO metrics (run_id, group_id, group_size, name, value)
                VALUES (?, ?, ?, ?, ?)
            ''', rows)
            conn.commit()
        logger.debug("运行%d写入%d项指标（组%s）", run_id, len(rows), group_id)

    def get_metrics(self, run_id: int) -> List[Dict]:
        """获取某次运行的全部指标"""
        with self._get_connection() as conn:
            cursor = conn.execute('''
                SELECT group_id, group_size, name, value FROM metrics
                WHERE run_id = ? ORDER BY id
            ''', (run_id,))
            return [dict(row) for row in cursor.fetchall()]

    def metric_by_group_size(self, name: str, run_ids: List[int] = None) -> List[Dict]:
        """按组规模汇总某个指标：均值与记录数，按组规模升序"""
        query = '''
            SELECT group_size, AVG(value) AS mean, COUNT(*) AS count
            FROM metrics WHERE name = ?
        '''
        params: list = [name]
        if run_ids:
            query += f" AND run_id IN ({','.join('?' * len(run_ids))})"
            params.extend(run_ids)
        query += ' GROUP BY group_size ORDER BY group_size'
        with self._get_connection() as conn:
            cursor = conn.execute(query, params)
            return [dict(row) for row in cursor.fetchall()]
