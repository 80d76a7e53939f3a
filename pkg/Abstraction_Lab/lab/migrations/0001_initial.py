# Generated by Django 5.2.7

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment', models.CharField(choices=[('SingleTask', 'Single task'), ('Transfer', 'Transfer'), ('SampleSweep', 'Sample-size sweep'), ('Analysis', 'Bound analysis'), ('DumpAbstraction', 'Abstraction dump')], max_length=20)),
                ('env_kind', models.CharField(max_length=20)),
                ('seeds', models.JSONField(default=list)),
                ('config', models.JSONField(default=dict)),
                ('content_hash', models.CharField(max_length=64)),
                ('out_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('failed_stage', models.CharField(blank=True, max_length=50)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
                'indexes': [
                    models.Index(fields=['status'], name='lab_run_status_idx'),
                    models.Index(fields=['experiment', 'env_kind'], name='lab_run_exp_env_idx'),
                    models.Index(fields=['content_hash'], name='lab_run_hash_idx'),
                ],
            },
        ),
        migrations.CreateModel(
            name='BoundReportRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('delta', models.FloatField()),
                ('mean_l1', models.FloatField()),
                ('rademacher_estimate', models.FloatField()),
                ('n', models.PositiveIntegerField()),
                ('delta_prob', models.FloatField()),
                ('theorem_bound', models.FloatField()),
                ('theorem_bound_pinsker', models.FloatField()),
                ('lemma_bound', models.FloatField()),
                ('measured_value_gap', models.FloatField()),
                ('lemma_holds', models.BooleanField()),
                ('grid_l1', models.FloatField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.CASCADE, related_name='bound_reports', to='lab.experimentrun')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
